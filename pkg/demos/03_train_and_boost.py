"""
Training a small booster and boosting a degraded fusion result
==============================================================

A shortened version of the full training protocol: 16 pairs, 64x64 patches,
fewer epochs and a larger learning rate so it finishes in under a minute.
The full-size run lives in the acceptance tests.
"""

import time
from dataclasses import replace

import numpy as np

from fusionbooster.backbones import DegradeSpec, degrade, fuse_mean
from fusionbooster.booster import BoosterConfig, Triple, boost, train_ase, train_probe
from fusionbooster.imaging import synth_pair
from fusionbooster.metrics import edge_intensity, entropy, std_dev

spec = DegradeSpec(noise_sigma=0.05, blur_k=2, contrast=0.7)


def make(seeds):
    out = []
    for s in seeds:
        a, b = synth_pair(s, "modality")
        out.append(Triple(a, b, degrade(fuse_mean(a, b), replace(spec, seed=s))))
    return out


train, held_out = make(range(16)), make(range(100, 104))
cfg = BoosterConfig(epochs=8, patch=64, patches_per_pair=8, lr=5e-4, seed=1)

start = time.perf_counter()
probe_a, probe_b, probe_trace = train_probe(train, cfg, log=print)
ase, ase_trace = train_ase(train, probe_a, probe_b, cfg, log=print)
print(f"training took {time.perf_counter() - start:.1f} s")

# compare the degraded backbone output with its boosted version
for a, b, f in held_out:
    out = boost(probe_a, probe_b, ase, f, a, b, cfg.k)
    print(f"EN {entropy(f):.3f} -> {entropy(out):.3f}   "
          f"SD {std_dev(f):6.2f} -> {std_dev(out):6.2f}   "
          f"EI {edge_intensity(f):6.2f} -> {edge_intensity(out):6.2f}")

print("boosted range:", float(np.min(out)), float(np.max(out)))
