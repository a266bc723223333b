"""Light-field rearrangements: EPIs, MacPI and the two diagonal paths.

Run with ``python3 demos/01_light_field_geometry.py``.
"""
import numpy as np

from omniepi import geometry as geo
from omniepi.autodiff import Tensor

U = V = 3
H, W = 4, 5

# label every sample with its (u, v, h, w) coordinate so the layouts are readable
u, v, h, w = np.meshgrid(np.arange(U), np.arange(V), np.arange(H), np.arange(W), indexing="ij")
labels = (1000 * u + 100 * v + 10 * h + w).reshape(1, 1, U * V, H, W).astype(float)
lf = geo.LightField(Tensor(labels, dtype=np.float64), U, V)
print("light field (B, C, A, H, W):", lf.shape, " angular index a = u*V + v")

hor = geo.to_horizontal_epi(lf)
print("\nhorizontal EPI", hor.tensor.shape)
print("one EPI (rows u, columns h) at v=1, w=2:")
print(hor.tensor.data.reshape(-1, U, H)[1 * W + 2].astype(int))

ver = geo.to_vertical_epi(lf)
mac = geo.to_macpi(lf)
print("\nvertical EPI", ver.tensor.shape, "   MacPI", mac.tensor.shape)

# every rearrangement is a pure permutation, so the round trip is exact
for view in (hor, ver):
    back = geo.from_epi(view)
    print(f"{view.direction:>10} round trip exact:", np.array_equal(back.tensor.data, labels))
print(f"{'macpi':>10} round trip exact:", np.array_equal(geo.from_macpi(mac).tensor.data, labels))

# diagonals: the 45 degree path walks (0,0) -> (2,2), the 135 degree path (0,2) -> (2,0)
i45, i135 = geo.diagonal_indices(U, V)
print("\nangular indices on the 45 degree path: ", i45)
print("angular indices on the 135 degree path:", i135)
e45, e135 = geo.extract_diagonals(lf)
print("diagonal EPI layout (B, C, W, U, H):", e45.tensor.shape)

# scattering both paths back adds their contributions: the centre view lies on both
ones = Tensor(np.ones(e45.tensor.shape))
hits = geo.scatter_diagonals(ones, ones, lf).tensor.data[0, 0, :, 0, 0]
print("\nhits per view after scattering ones back:")
print(hits.reshape(U, V).astype(int))
