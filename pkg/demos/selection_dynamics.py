"""Watch the Fisher-guided selection settle as the exploration noise decays.

Runs selective fine-tuning of a small backbone on the downscale task and
prints, every few steps, how many coordinates are selected, how much the
selection overlaps the previous step and the current noise scale.
"""

import numpy as np

from gridpeft import tasks
from gridpeft.backbone import Backbone, BackboneConfig
from gridpeft.objectives import objective_for
from gridpeft.peft import apply_policy
from gridpeft.sfas import AdamW, FisherState, sfas_step

STEPS = 60


def main():
    ds = tasks.gen_downscale(0, 40, grid=tasks.GridSpec(16, 16))
    objective = objective_for("downscale")
    cfg = BackboneConfig(in_vars=3, out_vars=3, height=16, width=16, patch_h=4, patch_w=4, dim=16, depth=2, heads=2)
    model = Backbone(cfg, seed=0)
    apply_policy(model, "sfas_only", {"sfas.k": 0.02})
    state = FisherState(domain=model.params.names(group="backbone", trainable=True), k=0.02, gamma=0.2, ts=STEPS)
    opt = AdamW(model.params)
    rng = np.random.default_rng(0)
    print(f"{'step':>4} {'loss':>8} {'selected':>8} {'overlap':>8} {'noise':>7}")
    for step in range(STEPS):
        batch = objective.batch(ds, rng.choice(ds.train_end, 8, replace=False))
        loss = sfas_step(model, objective, batch, state, opt, 3e-3)
        row = state.stats[-1]
        if step % 6 == 0 or step == STEPS - 1:
            overlap = row["overlap_with_prev"]
            overlap = f"{overlap:8.3f}" if overlap != "" else f"{'-':>8}"
            print(f"{step:4d} {loss:8.4f} {row['selected_count']:8d} {overlap} {row['noise_scale']:7.4f}")
    touched = state.ever_selected.mean()
    print(f"coordinates ever updated: {100 * touched:.1f}% of {state.ever_selected.size}")


if __name__ == "__main__":
    main()
