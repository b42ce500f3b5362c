"""
Training a window localizer
===========================

The agent starts from the whole slice and, for at most ten steps, zooms into
one of five sub-windows, shifts, or triggers. Its reward is +1/-1 for
raising or lowering the overlap with the target and +-3 when it stops.
This trains an axial agent on a handful of phantoms for a few epochs. The
full-size run (40 volumes, 25 epochs) is what `pansearch train-loc` does.
"""
import numpy as np

from pansearch import dqn
from pansearch.env import EnvConfig
from pansearch.geometry import ActionKind
from pansearch.synthdata import PhantomConfig, clip_rescale, generate_phantom, slice_view

images, masks = [], []
for seed in range(8):
    vol, lab = generate_phantom(PhantomConfig(seed=seed))
    for img, m in zip(slice_view(clip_rescale(vol), "axial"), slice_view(lab, "axial")):
        if m.any():
            images.append(img)
            masks.append(m)
print(len(images), "target slices")

env_cfg = EnvConfig()
net, log = dqn.train_localizer(images, masks, env_cfg, dqn.DqnConfig(epochs=8, seed=1))
for row in log:
    print(f"epoch {row['epoch']} eps {row['epsilon']:.1f} reward {row['mean_reward']:+.2f} recall {row['mean_recall']:.3f}")

recs, greedy = dqn.evaluate_localizer(net, images, masks, env_cfg)
_, rand = dqn.evaluate_random(images, masks, env_cfg)
print(f"greedy recall {greedy['mean']:.3f}, random policy {rand['mean']:.3f}")

# show one episode that ended on the target
r = max(recs, key=lambda e: (e.recall, -len(e.actions)))
print("one episode:", " -> ".join(ActionKind(a).name for a in r.actions), "| window", tuple(r.window),
      f"recall {r.recall:.2f} IoU {r.iou:.2f}")

freqs = dqn.action_frequencies(recs)
corr = dqn.action_correlation(freqs)
print("most used actions:", [ActionKind(i).name for i in np.argsort(-freqs.sum(0))[:3]])
