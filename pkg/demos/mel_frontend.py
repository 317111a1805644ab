"""Log-mel features of a 10 s tone sitting on a mel bin center."""

import numpy as np

from siamav.data import MelConfig, log_mel, mel_center_frequencies

cfg = MelConfig()
f = mel_center_frequencies(cfg)[64]
t = np.arange(10 * cfg.sample_rate) / cfg.sample_rate
spec = log_mel(0.5 * np.sin(2 * np.pi * f * t), cfg)
raw = log_mel(0.5 * np.sin(2 * np.pi * f * t), cfg, pad=False)
print(f"tone {f:.1f} Hz -> padded {spec.shape}, raw {raw.shape[0]} frames")
print(f"argmax bin 64 in {np.mean(raw.argmax(axis=1) == 64):.1%} of frames; padding value {cfg.silence_value():.4f}")
