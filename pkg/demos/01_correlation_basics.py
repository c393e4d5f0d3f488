"""Correlation maps on a toy scene.

Two frames share a bright square that moves one cell to the right. A query on
the square's leading edge sits on background in the reference frame, yet its
correlation row should put nearly all of its mass on square cells a step to
the left. Reconstruction through the map then recovers the moved square.

    python demos/01_correlation_basics.py
"""
import numpy as np

from stcorr.correlation import correlation_downsample, entropy_map, entropy_mask, local_correlation
from stcorr.temporal import reconstruct_frame


def features(frame):
    # position-free toy features: one channel for "square", one for "background", plus a little noise
    rng = np.random.default_rng(0)
    f = np.stack([frame, 1.0 - frame, 0.05 * rng.normal(size=frame.shape)], -1)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


ref = np.zeros((12, 12))
ref[4:8, 3:7] = 1.0
tgt = np.roll(ref, 1, axis=1)

c = local_correlation(features(tgt)[None], features(ref)[None], r=5, tau=0.05)
rows = c.values.data[0]
print("rows sum to one:", np.allclose(rows.sum(-1), 1.0))

# leading-edge query: the reference has background at (5, 7), square at (5, 6)
on_square = np.array([ref[5 + k // 5 - 2, 7 + k % 5 - 2] for k in range(25)])
print("mass of query (5, 7) on reference square cells:", round(float(rows[5, 7] @ on_square), 6))

# rebuild the target from the reference through the map
rebuilt = reconstruct_frame(c, ref[..., None]).data[0, ..., 0]
print("reconstruction error inside the square:", float(np.abs(rebuilt - tgt)[4:8, 4:8].mean()))

H = entropy_map(c, "shannon").H[0]
mask = entropy_mask(H[None], "q0.5")[0]
print("median-selected queries:", int(mask.sum()), "of", mask.size)

coarse = correlation_downsample(c, s=2, r_out=3)
print("downsampled map:", coarse.values.shape, "rows sum to one:",
      np.allclose(coarse.values.data.sum(-1), 1.0))
