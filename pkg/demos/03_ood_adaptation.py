"""Meta-train a shared backbone on vel-line, then adapt to an out-of-support velocity.

The backbone is trained on target velocities in [0, 3] and frozen; only the
linear head and tail are learned for v = -2.  A from-scratch TD3 actor with
the same environment and gradient budget is the reference.  Takes a few
minutes on one core.

Run: python demos/03_ood_adaptation.py
"""
import numpy as np

from apb.envs import ood_task
from apb.meta import AdaptConfig, MetaTrainConfig, adapt, meta_train, run_baseline_td3
from apb.nn import load_checkpoint

meta = meta_train(MetaTrainConfig(n_tasks=10, n_trajectories=2, updates_per_cycle=100, batch_size=128,
                                  max_cycles=30, plateau_patience=10, critic_lr=1e-2, init_scale=1e-3), "vel-line")
print("meta-train returns per task:", np.round(meta.final_returns, 1))
backbone = load_checkpoint(meta.save("/tmp/apb_demo_backbone.npz"))

task = ood_task("vel-line")
for seed in range(3):
    cfg = AdaptConfig(seed=seed, protocol="action", sigma=0.1, reset_every=15, n_trajectories=10, n_updates=500,
                      batch_size=128, actor_lr=1e-3, critic_lr=1e-2, init_scale=1e-3, total_episodes=200)
    apb = adapt(backbone, task, cfg)
    base = run_baseline_td3(task, cfg)
    assert (apb.env_steps, apb.grad_steps) == (base.env_steps, base.grad_steps)
    print(f"seed {seed}: frozen backbone {apb.final_return:7.2f}   from scratch {base.final_return:7.2f}   "
          f"backbone unchanged: {apb.backbone_constant}")
