from .augment import AugmentParams, augment
from .density import pool_density, rasterize_density
from .loaders import load_carpk, load_fsc147, load_fsc147s
from .samples import CountingSample, load_image, to_pil
from .synth import SYNTH_FILES, SynthImage, as_samples, synth_dataset, write_corpus

__all__ = [
    "AugmentParams", "augment", "pool_density", "rasterize_density", "load_carpk", "load_fsc147",
    "load_fsc147s", "CountingSample", "load_image", "to_pil", "SYNTH_FILES", "SynthImage", "as_samples",
    "synth_dataset", "write_corpus",
]
