#!/usr/bin/env python
# coding: utf-8

# # Learning depth from a second view
#
# Without depth labels, a rendered depth is judged by warping the target
# pixel into a neighbouring frame and comparing colours.  A single-depth
# reprojection loss only sees one point on the epipolar line.  The
# multi-proposal loss scores every sample along the ray, weighted by the
# rendering weights, so gradients reach depths far from the current guess.

# In[1]:

import numpy as np

from sdfocc import autodiff as ad
from sdfocc import losses as L
from sdfocc.geometry import Camera, Intrinsics, RelativeCamera, look_at, yaw_pitch_pose
from sdfocc.scenes import default_scene, oracle_render

np.set_printoptions(precision=4, suppress=True)


# ## Two frames of the desk scene
#
# The oracle renderer gives exact depth and a textured image for any
# camera.  The source frame sits 0.4 m further along the trajectory.

# In[2]:

scene = default_scene()
K = Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)
target_cam = Camera(K, yaw_pitch_pose(np.array([0.0, 1.0, 1.6]), 0.0, np.deg2rad(12)))
source_cam = Camera(K, yaw_pitch_pose(np.array([0.0, 1.4, 1.6]), 0.0, np.deg2rad(12)))
z_true, target, _ = oracle_render(scene, target_cam)
_, source, _ = oracle_render(scene, source_cam)
rel = RelativeCamera(target_cam, source_cam)
print("depth range in view", z_true[z_true < 100].min(), z_true[z_true < 100].max())


# ## Scanning the epipolar line
#
# For one pixel, score a sweep of depth hypotheses.  The true depth sits
# near the bottom of the curve.  Below 3 m the curve is a bumpy plateau,
# so a single hypothesis started there gets little or misleading gradient.

# In[3]:

px = np.array([[44.0, 16.0]])
sweep = np.linspace(1.0, 14.0, 27)[None]
diss, valid = L.proposal_dissimilarities(px, target, source, sweep, rel)
best = sweep[0, np.argmin(np.where(valid[0], diss[0], np.inf))]
print("true z", z_true[16, 44], "best hypothesis", best)
for z, d, ok in zip(sweep[0], diss[0], valid[0]):
    print(f"  z {z:5.2f}  {d:.3f} {'#' * int(200 * d) if ok else '(out of view)'}")


# ## The two losses agree on a delta
#
# Put all rendering weight on one proposal and the multi-proposal loss
# reduces to the single-depth one.

# In[4]:

tape = ad.Tape(np.float64)
k = 9
w = np.zeros_like(sweep)
w[0, k] = 1.0
mvs, _ = L.l_mvs(tape.param(w), tape.param(np.zeros(1)), diss, valid, np.zeros(1), np.ones(1, bool))
rpj, _ = L.l_rpj(px, target, source, tape.param(sweep[:, k]), rel)
print("multi-proposal", float(mvs.value[0]), "single depth", float(rpj.value[0]))


# ## Where the gradient goes
#
# With spread-out weights, the gradient of the multi-proposal loss with
# respect to each weight is that proposal's dissimilarity.  Descent moves
# weight toward the best-matching depth wherever it is on the ray.

# In[5]:

tape = ad.Tape(np.float64)
w = tape.param(np.full_like(sweep, 1.0 / sweep.shape[1]))
mvs, _ = L.l_mvs(w, tape.param(np.zeros(1)), diss, valid, np.zeros(1), np.ones(1, bool))
g = ad.grad(tape, ad.sum(mvs), [w])[w.id]
print("proposal with the most negative relative gradient:",
      sweep[0, np.argmin(np.where(valid[0], g[0], np.inf))])


# ## Automasking
#
# A pixel whose unwarped source colour already matches better than any
# warp carries no depth signal (sky, flat walls, static camera).  Such
# pixels are masked out of the depth loss.

# In[6]:

static_src = target.copy()
zd = np.full((1, 1), z_true[16, 44])
loss, per_ray, counts = L.l_dep(px, target, [static_src], [RelativeCamera(target_cam, target_cam)],
                                zdepth=ad.Tape(np.float64).param(zd[:, 0]), kind="rpj")
print("counts with an identical source frame:", counts)
