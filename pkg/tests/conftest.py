import pytest

from qta.data import SyntheticConfig, answer_vocabulary, gen_routing
from qta.encoders import Vocab
from qta.fusion import QuestionTypeSet
from qta.models import ModelSpec, build_model


@pytest.fixture(scope="session")
def small_cfg():
    return SyntheticConfig(n_types=4, n_answers=3, dim_a=8, dim_b=8, samples_per_type=40, seed=3)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return gen_routing(small_cfg)


@pytest.fixture
def make_model(small_cfg, small_data):
    """Build a small model over the shared synthetic dataset."""
    train_set, _ = small_data
    vocab = Vocab.build(s.question for s in train_set.samples)

    def build(architecture="CATL-QTA", **kw):
        kw.setdefault("embed_dim", 6)
        kw.setdefault("lstm_hidden", 8)
        kw.setdefault("mlp_hidden", 16)
        kw.setdefault("w2v_dim", 5)
        kw.setdefault("nmt_dim", 7)
        kw.setdefault("type_embed_dim", 4)
        spec = ModelSpec(
            architecture=architecture,
            source_shapes={"A": [small_cfg.dim_a], "B": [small_cfg.dim_b]},
            **kw,
        )
        return build_model(spec, vocab, QuestionTypeSet(tuple(small_cfg.names())), answer_vocabulary(small_cfg))

    return build


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
