import numpy as np
import pytest

from profiledenoise.dataset import temporal_split
from profiledenoise.denoise import FewShotExemplar, UserContext
from profiledenoise.multivae import MultiVAE, TrainConfig, train
from profiledenoise.synth import SynthSpec, generate

GOLDEN_TITLES = ("Die Hard", "Back to the Future", "Home Alone", "Toy Story", "Heat")
GOLDEN_RECS = ("Alien", "Aliens", "Fargo", "Heat", "Jaws", "Se7en", "Speed", "Casino", "Ronin", "Psycho")


def golden_context() -> UserContext:
    return UserContext(
        user=0,
        window=(10, 11, 12, 13, 14),
        window_titles=GOLDEN_TITLES,
        candidate=20,
        candidate_title="Lion King",
        candidate_rank=13,
        profile=(3, 10, 11, 12, 13, 14),
        examples=FewShotExemplar("Aladdin", ("Home Alone", 7, 2), ("Die Hard", 7, 19)),
        top_recs=GOLDEN_RECS,
    )


@pytest.fixture(scope="session")
def synth_world():
    """A small clustered dataset with noise labels and a trained MultiVAE."""
    spec = SynthSpec(n_users=240, n_items=48, n_clusters=4, min_len=8, max_len=12, noise_rate=0.3, seed=3)
    inter, titles, labels = generate(spec)
    split = temporal_split(inter, titles)
    params = train(split.train, TrainConfig(epochs=40, batch_size=60, hidden=64, latent=16, seed=3))
    return split, MultiVAE(params), labels, spec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ----------------------------------------------------
# test_acceptance.py fills this; the terminal summary prints one line per criterion.
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{status}] {num:2d}. {title}: {detail}")
