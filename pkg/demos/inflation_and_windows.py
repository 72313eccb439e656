"""Inflate a 2D network to 3D and run sliding-window inference on one study.

The inflated network sees a constant clip the same way the 2D network sees
one frame (away from the temporal borders), and every frame ends up covered
by exactly N_S windows.

    python3 demos/inflation_and_windows.py
"""

from __future__ import annotations

import torch

from lvquant.data import preprocess_study
from lvquant.evaluate import predict_3d, window_starts_covering
from lvquant.model import BACKBONES, HeadSpec, build_2d, inflate_to_3d
from lvquant.phantom import generate_studies

torch.manual_seed(0)
net2d = build_2d(BACKBONES["mini"], HeadSpec("regression"), seed=0).eval()
net3d = inflate_to_3d(net2d).eval()

x = torch.rand(1, 3, 96, 96)
clip = x.unsqueeze(2).expand(-1, -1, 16, -1, -1)
with torch.no_grad():
    f2, f3 = net2d.features(x), net3d.features(clip)
for t in (0, 8, 15):
    d = (f3[:, :, t] - f2).abs().max().item() / f2.abs().max().item()
    print(f"clip position {t:>2}: relative feature difference {d:.1e}")

print("\nwindows covering frame 0 with N_S=5:", window_starts_covering(0, 5))

_, raw = next(iter(generate_studies(1, seed=4)))
study = preprocess_study(raw)
reg, _ = predict_3d(net3d, study, n_s=5)
print("untrained 3D prediction shape:", reg.shape)
