import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import time  # noqa: E402

import pytest  # noqa: E402

from dsvae.config import load_config  # noqa: E402
from dsvae.evaluation import ratio_config  # noqa: E402
from dsvae.synth import SynthCorpusSpec, synth_corpus, synth_noise  # noqa: E402
from dsvae.training import build_dataset, train  # noqa: E402


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 speakers x 5 utterances x 0.4 s, plus a small noise bank."""
    root = tmp_path_factory.mktemp("tiny")
    synth_corpus(root / "corpus", SynthCorpusSpec(n_speakers=3, utts_per_speaker=5, duration_s=0.4), seed=11)
    synth_noise(root / "noise", n_per_category=1, duration_s=0.5, seed=11)
    return root / "corpus", root / "noise"


CORPUS_SEED = 7


# -- desk-scale corpus and a trained-model cache shared across test modules ---------------

@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    synth_corpus(root / "corpus", SynthCorpusSpec(), seed=CORPUS_SEED)
    synth_noise(root / "noise_train", seed=CORPUS_SEED)
    synth_noise(root / "noise_test", seed=CORPUS_SEED + 1000)
    return root


@pytest.fixture(scope="session")
def desk_cfg():
    return load_config("timit_desk")


@pytest.fixture(scope="session")
def desk_ds(desk_data, desk_cfg):
    return build_dataset(desk_data / "corpus", desk_cfg.feature, desk_cfg.model.seg_len,
                         noise_dir=desk_data / "noise_train", test_fraction=desk_cfg.train.test_fraction)


@pytest.fixture(scope="session")
def trained_models():
    """Cache of trained desk models keyed by (ratio, augment)."""
    return {}


def desk_model(cache, ds, cfg, ratio, augment=False):
    """Train (once per session) the desk model at beta/alpha = ``ratio``; returns (model, seconds)."""
    key = (round(float(ratio), 6), augment)
    if key not in cache:
        run = ratio_config(cfg, ratio).replace(augment=augment)
        t = time.perf_counter()
        cache[key] = (train(ds, run).model, time.perf_counter() - t)
    return cache[key]
