"""Multi-ratio masking on one batch at full geometry (512 audio, 196 visual tokens)."""

import numpy as np

from siamav.mask import DEFAULT_RATIOS, expected_kept_fraction, plan_multi_ratio

plan = plan_multi_ratio(12, 512, 196, DEFAULT_RATIOS, np.random.default_rng(0))
for modality in ("audio", "visual"):
    mp = plan[modality]
    print(modality)
    for r in DEFAULT_RATIOS:
        members = plan.buckets[(modality, r)]
        print(f"  ratio {r:.1f}: instances {members}, kept {mp.kept[members[0]].size} tokens each")
print(f"kept fraction {plan.kept_tokens() / plan.total_tokens():.4f} (expected {expected_kept_fraction(DEFAULT_RATIOS)})")
