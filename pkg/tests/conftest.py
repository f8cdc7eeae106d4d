import os

# Pin BLAS pools before numpy loads anywhere: single-threaded kernels make
# training runs bitwise reproducible.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from vesselseg.config import SynthConfig
from vesselseg.data import TrainSample
from vesselseg.engine.nnops import bilinear_resize_array
from vesselseg.losses import downsample_mask
from vesselseg.preprocess import assemble_four_channel, locate_optic_disc, weight_map
from vesselseg.synth import generate


def make_synth_sample(index: int, resolution: int = 64, seed_family: int = 100,
                      synth_cfg: SynthConfig | None = None) -> TrainSample:
    """A fully prepared training sample from the procedural generator."""
    cfg = synth_cfg or SynthConfig()
    s = generate(cfg, np.random.default_rng((seed_family, index)))
    disc = locate_optic_disc(s.image)
    wmap = weight_map(disc, *s.mask.shape)
    mask = s.mask.astype(np.float64)
    return TrainSample(
        dataset="synth",
        image_id=f"synth_{index:04d}.png",
        rgb=s.image,
        mask=mask,
        wmap=wmap,
        four=assemble_four_channel(s.image, resolution),
        mask_r=downsample_mask(mask, resolution, resolution),
        wmap_r=bilinear_resize_array(wmap, resolution, resolution),
    )


@pytest.fixture(scope="session")
def synth_samples_small():
    """Eight prepared 64x64 samples shared across tests."""
    return [make_synth_sample(i) for i in range(8)]
