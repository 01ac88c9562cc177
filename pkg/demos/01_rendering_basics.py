#!/usr/bin/env python
# coding: utf-8

# # Rendering an SDF along one ray
#
# A signed distance field says how far each point is from the nearest
# surface, negative inside.  Volume rendering turns SDF samples along a ray
# into opacities, then into weights that say where the ray probably stops.
# This walk-through follows one ray through a plane and a sphere.

# In[1]:

import numpy as np

from sdfocc import autodiff as ad
from sdfocc.field import GridSpec, SdfField
from sdfocc.geometry import Ray
from sdfocc.renderer import alphas_from_sdf, render_ray, weights_from_alphas

np.set_printoptions(precision=4, suppress=True)


# ## Opacities from SDF samples
#
# The opacity between two samples compares the logistic CDF of the SDF at
# both ends.  Moving into a surface (SDF falling) gives positive opacity,
# moving away gives zero.

# In[2]:

tape = ad.Tape(np.float64)
s = tape.param(np.array([1.0, 0.5, 0.1, -0.3, -0.8, -0.4, 0.2]))
for a in (2.0, 10.0, 100.0):
    alpha = alphas_from_sdf(s, a)
    w, T, residual = weights_from_alphas(alpha)
    print(f"a = {a:5.0f}  alpha {alpha.value}  weights {w.value}  residual {float(residual.value):.4f}")


# Larger sharpness `a` squeezes the weight into the interval holding the
# zero crossing.  The last two intervals climb back out of the object and
# add no weight.

# ## A dense grid field
#
# The field stores one SDF value per voxel center and interpolates
# trilinearly.  An affine SDF, like a ground plane, is reproduced exactly.

# In[3]:

spec = GridSpec.cube([-2, -2, -2], 4.0, 32)
height = -0.25
field = SdfField.from_function(spec, lambda p: p[:, 2] - height, rho=np.log(100.0 / spec.voxel_size[0]))

ray = Ray(np.array([0.0, 0.0, 3.0]), np.array([0.3, 0.1, -1.0]) / np.linalg.norm([0.3, 0.1, -1.0]))
out = render_ray(ray, field.bind(ad.Tape()), M=96)
crossing = (height - ray.origin[2]) / ray.direction[2]
spacing = float(out.samples.t_far[0] - out.samples.t_near[0]) / 96
print("rendered depth", float(out.depth.value[0]), "true crossing", crossing)
print("error in sample spacings", abs(float(out.depth.value[0]) - crossing) / spacing)


# Each weight belongs to the interval between two samples and is paired
# with the interval midpoint, so a sharp surface lands within half a sample
# spacing of the true crossing.

# ## Sharpness and blur
#
# With a soft sigmoid the weights spread out and some mass is left over,
# which goes to the far end of the volume, so depth is biased.  The fit
# anneals `a` upward for this reason.

# In[4]:

sphere = SdfField.from_function(spec, lambda p: np.linalg.norm(p - [0.2, 0.0, 0.0], axis=1) - 0.8)
ray = Ray(np.array([0.2, 0.0, 3.0]), np.array([0.0, 0.0, -1.0]))
for a in (1.0, 5.0, 25.0, 400.0):
    sphere.params["rho"] = np.array(np.log(a))
    out = render_ray(ray, sphere.bind(ad.Tape()), M=128)
    print(f"a = {a:6.0f}  depth {float(out.depth.value[0]):.4f}  (surface at 2.2)  "
          f"weight mass {float(out.weight_sum.value[0]):.3f}")
