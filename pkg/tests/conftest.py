import sys
import time
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dyckprobe import config, dyck_gen, experiments, trainer  # noqa: E402


@pytest.fixture(scope="session")
def desk():
    return config.desk_profile()


@pytest.fixture(scope="session")
def desk_corpus(desk, tmp_path_factory):
    """The 100k-sentence desk corpus, generated once per session."""
    out = tmp_path_factory.mktemp("desk_corpus")
    t0 = time.perf_counter()
    summary = dyck_gen.write_corpus(desk.grammar, desk.count, out)
    elapsed = time.perf_counter() - t0
    return {"dir": out, "summary": summary, "seconds": elapsed, "sentences": dyck_gen.read_corpus(out)}


@pytest.fixture(scope="session")
def desk_split(desk, desk_corpus):
    tr, te = trainer.split_corpus(desk_corpus["sentences"], desk.train.split_fraction, desk.train.split_seed)
    return trainer.EncodedCorpus.from_sentences(tr), trainer.EncodedCorpus.from_sentences(te)


@pytest.fixture(scope="session")
def desk_sweep(desk, desk_split):
    """H in {2, 10, 20}, three seeds each, trained once and shared."""
    train, test = desk_split
    return experiments.sweep_units(train, test, desk.units, replace(desk.train, seed=desk.seed), desk.seeds,
                                   keep_params=True)


@pytest.fixture(scope="session")
def probe_models(desk, desk_split, desk_sweep):
    """Encoders for the state analysis: H=20 from the sweep, H=2, 8, 50 trained here."""
    train, test = desk_split
    models = {r.hidden_units: r.params for r in desk_sweep if r.seed == desk.seeds[0] and r.params is not None}
    for H in desk.scalar_units:
        if H not in models:
            models[H], _ = trainer.fit(train, None, replace(desk.train, hidden_units=H,
                                                            seed=experiments.derive_seed(desk.seed, H)))
    return models
