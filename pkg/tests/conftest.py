import numpy as np
import pytest

from nested_kv.model import ModelConfig, init_weights
from nested_kv.projections import ProjectionBank, init_bank, iter_slots, random_orthogonal


def make_weights(config, seed=0):
    w = init_weights(config, seed)
    # sharpen the output head so logit differences are far above roundoff
    w.tensors["lm_head" if "lm_head" in w.tensors else "tok_emb"] *= 50.0
    return w


def random_prompts(config, n, length, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, config.vocab, size=length) for _ in range(n)]


def random_bank(config, seed=0):
    rng = np.random.default_rng(seed)
    return ProjectionBank.from_inits(config, {s: random_orthogonal(config.head_dim, rng) for s in iter_slots(config)})


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, head_dim=8, vocab=32, context=16, mlp_hidden=24)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return make_weights(small_config, 0)


@pytest.fixture(scope="session")
def small_pca_bank(small_config, small_weights):
    return init_bank(small_weights, small_config, random_prompts(small_config, 4, 16, seed=1))


@pytest.fixture(scope="session")
def default_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def default_weights(default_config):
    return make_weights(default_config, 0)


# -- acceptance summary ---------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["notes"].append(f"{item.name}: {'skipped' if rep.skipped else 'failed'} during {rep.when}")
    if rep.when == "call":
        entry["notes"].extend(f"{k}={v}" for k, v in rep.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")
        for note in e["notes"]:
            terminalreporter.write_line(f"    {note}")
