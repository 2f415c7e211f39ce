"""End-to-end acceptance checks on the default toy model.

Training artifacts (base checkpoint, PCA bank, distilled banks) are built
once per source revision and kept in the pytest cache; run with
``--cache-clear`` to rebuild everything from scratch.
"""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from conftest import make_weights, random_bank
from nested_kv import checkpoint
from nested_kv.allocation import RankAllocation
from nested_kv.autodiff import grad_check
from nested_kv.corpus import chunks, from_bytes, toy_text
from nested_kv.evaluation import evaluate
from nested_kv.linalg import cayley, orthogonality_defect, skew_from_params
from nested_kv.model import (
    CompressedKVCache,
    ModelConfig,
    attention_error_decomposition,
    decode_step,
    forward_baseline,
    forward_merged,
    forward_projected,
    init_weights,
    merge_output_weights,
)
from nested_kv.projections import collect_states, init_bank, iter_slots, load_bank, save_bank, second_moment_spectrum
from nested_kv.search import Calibration, SearchConfig, budget, calib_kl, run_greedy_search, search_with_trace, uniform_allocation
from nested_kv.training import PretrainConfig, Schedule, TrainConfig, distill, distill_loss, pretrain

CONFIG = ModelConfig()  # L=2, H=H_kv=4, d=16, vocab 256, context 64
D = CONFIG.head_dim
CORPUS_BYTES = 300_000
PRETRAIN_STEPS = 2000
DISTILL_STEPS = 2000
SEEDS = (0, 1, 2)
PCA_WINDOWS = 32
EVAL_CHUNKS = 64
SRC = Path(__file__).resolve().parents[1] / "src" / "nested_kv"

slow = pytest.mark.slow


def criterion(n, title):
    return pytest.mark.acceptance(n, title)


# -- shared artifacts -----------------------------------------------------------


def _source_key() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(repr((CORPUS_BYTES, PRETRAIN_STEPS, DISTILL_STEPS, PCA_WINDOWS)).encode())
    return h.hexdigest()[:16]


class Artifacts:
    def __init__(self, root: Path):
        self.root = root
        self.corpus = from_bytes(toy_text(CORPUS_BYTES, 0))
        self._banks = {}
        self._evals = {}
        path = root / "base.ckpt"
        if not path.exists():
            w, _ = pretrain(init_weights(CONFIG, 0), self.corpus.train, PretrainConfig(steps=PRETRAIN_STEPS))
            checkpoint.save_weights(w, path)
        self.weights = checkpoint.load_weights(path)

    def bank(self, name: str):
        """``pca`` or ``<mode>-<seed>`` with mode in nested, fixed, free, random."""
        if name in self._banks:
            return self._banks[name]
        path = self.root / f"{name}.bank"
        if not path.exists():
            if name == "pca":
                bank = init_bank(self.weights, CONFIG, chunks(self.corpus.train, CONFIG.context, PCA_WINDOWS))
            else:
                mode, seed = name.split("-")
                flags = {
                    "nested": {},
                    "fixed": {"fixed_rank": D // 2},
                    "free": {"no_orthogonality": True},
                    "random": {"random_init": True},
                }[mode]
                cfg = TrainConfig(steps=DISTILL_STEPS, seed=int(seed), **flags)
                bank, _ = distill(self.weights, self.bank("pca"), self.corpus.train, cfg)
            save_bank(bank, path)
        self._banks[name] = load_bank(path)
        return self._banks[name]

    def eval(self, name: str, alloc: RankAllocation):
        key = (name, alloc.r_k.tobytes(), alloc.r_v.tobytes())
        if key not in self._evals:
            self._evals[key] = evaluate(self.weights, CONFIG, self.bank(name), alloc, self.corpus.eval, max_chunks=EVAL_CHUNKS)
        return self._evals[key]


@pytest.fixture(scope="session")
def art(request, tmp_path_factory):
    cache = getattr(request.config, "cache", None)
    if cache is not None:
        root = Path(cache.mkdir(f"nested-acceptance-{_source_key()}"))
    else:
        root = tmp_path_factory.mktemp("acceptance")
    return Artifacts(root)


def uniform(rank):
    return RankAllocation.uniform(CONFIG, rank)


def random_alloc(config, rng):
    shape = (config.n_layers, config.n_kv_heads)
    return RankAllocation(rng.integers(1, config.head_dim + 1, shape), rng.integers(1, config.head_dim + 1, shape))


# -- 1 ------------------------------------------------------------------------------


@criterion(1, "full-rank identity")
def test_full_rank_identity(record_property):
    w = make_weights(CONFIG, 0)
    rng = np.random.default_rng(1)
    prompts = rng.integers(0, CONFIG.vocab, size=(100, CONFIG.context))
    worst = 0.0
    for bank in (random_bank(CONFIG, 2), init_bank(w, CONFIG, list(prompts[:8]))):
        bank = bank.copy()
        for slot in iter_slots(CONFIG):
            bank.set_generator(slot, rng.normal(scale=0.3, size=bank.slots[slot].generator.shape))
        diff = np.abs(forward_projected(w, CONFIG, bank, uniform(D), prompts) - forward_baseline(w, CONFIG, prompts))
        worst = max(worst, float(diff.max()))
    record_property("max_abs_diff", f"{worst:.3e}")
    assert worst <= 1e-8


# -- 2 ------------------------------------------------------------------------------


@criterion(2, "Cayley orthogonality")
@pytest.mark.parametrize("d", [2, 8, 16, 64])
def test_cayley_orthogonality(d, record_property):
    rng = np.random.default_rng(d)
    worst_defect = worst_det = 0.0
    for _ in range(1000):
        s = skew_from_params(rng.normal(size=d * (d - 1) // 2), d)
        u = cayley(s)
        worst_defect = max(worst_defect, orthogonality_defect(u))
        worst_det = max(worst_det, abs(np.linalg.det(u) - 1.0))
    record_property(f"d{d}", f"defect={worst_defect:.2e} |det-1|={worst_det:.2e}")
    assert worst_defect <= 1e-10 * d
    assert worst_det <= 1e-8


# -- 3 ------------------------------------------------------------------------------


@criterion(3, "gradient correctness")
def test_distill_gradient(record_property):
    config = ModelConfig(n_layers=1, n_heads=2, n_kv_heads=2, head_dim=4, vocab=32, context=8, mlp_hidden=16)
    w = make_weights(config, 5)
    rng = np.random.default_rng(6)
    bank = init_bank(w, config, list(rng.integers(0, 32, size=(4, 8))))
    for slot in iter_slots(config):
        bank.set_generator(slot, rng.normal(scale=0.3, size=bank.slots[slot].generator.shape))
    batch = rng.integers(0, 32, size=(3, 9))
    ranks = RankAllocation([[3, 2]], [[1, 3]])
    slots = list(iter_slots(config))

    def loss(tape, leaves):
        return distill_loss(w, config, bank, ranks, batch, tape=tape, leaves=dict(zip(slots, leaves))).total

    err = grad_check(loss, [bank.slots[s].generator.reshape(1, -1) for s in slots], 1e-5)
    record_property("max_rel_err", f"{err:.2e}")
    assert err <= 1e-5


# -- 4 ------------------------------------------------------------------------------


@criterion(4, "PCA tail identity")
def test_pca_tail_identity(record_property):
    w = make_weights(CONFIG, 0)
    prompts = list(np.random.default_rng(3).integers(0, CONFIG.vocab, size=(4, CONFIG.context)))
    bank = init_bank(w, CONFIG, prompts)
    states = collect_states(w, CONFIG, prompts)
    worst = 0.0
    for slot in iter_slots(CONFIG):
        x = states[slot]
        spectrum = second_moment_spectrum(x)
        total = float(np.sum(x * x))
        for r in Schedule.eighths(D).ranks:
            u = bank.truncated(slot, r)
            direct = float(np.sum((x - x @ u @ u.T) ** 2))
            tail = len(x) * float(spectrum.eigenvalues[r:].sum())
            # at r = d the tail is exactly zero; measure against total energy there
            worst = max(worst, abs(direct - tail) / max(tail, 1e-12 * total))
    record_property("max_rel_err", f"{worst:.2e}")
    assert worst <= 1e-8


# -- 5 ------------------------------------------------------------------------------


@criterion(5, "merged-path equivalence")
def test_merged_equivalence(record_property):
    w = make_weights(CONFIG, 0)
    rng = np.random.default_rng(7)
    bank = random_bank(CONFIG, 8)
    worst = 0.0
    for _ in range(20):
        alloc = random_alloc(CONFIG, rng)
        tokens = rng.integers(0, CONFIG.vocab, size=CONFIG.context)
        merged = forward_merged(w, CONFIG, bank, alloc, tokens)
        worst = max(worst, float(np.abs(merged - forward_projected(w, CONFIG, bank, alloc, tokens)).max()))
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst <= 1e-10


# -- 6 ------------------------------------------------------------------------------


@criterion(6, "incremental decoding equivalence")
def test_incremental_decode(record_property):
    w = make_weights(CONFIG, 0)
    rng = np.random.default_rng(9)
    bank = random_bank(CONFIG, 10)
    alloc = random_alloc(CONFIG, rng)
    tokens = rng.integers(0, CONFIG.vocab, size=32)
    one_shot = forward_projected(w, CONFIG, bank, alloc, tokens)
    cache = CompressedKVCache.empty(CONFIG, alloc)
    merged = merge_output_weights(w, bank, alloc)
    worst = 0.0
    for t, tok in enumerate(tokens):
        logits, cache = decode_step(cache, w, CONFIG, bank, alloc, tok, merged)
        worst = max(worst, float(np.abs(logits - one_shot[t]).max()))
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst <= 1e-8


# -- 7 ------------------------------------------------------------------------------


@criterion(7, "error decomposition")
def test_error_decomposition(record_property):
    w = make_weights(CONFIG, 0)
    rng = np.random.default_rng(11)
    bank = init_bank(w, CONFIG, list(rng.integers(0, CONFIG.vocab, size=(4, CONFIG.context))))
    worst = 0.0
    for _ in range(20):
        layer, head = int(rng.integers(CONFIG.n_layers)), int(rng.integers(CONFIG.n_heads))
        r_k, r_v = (int(x) for x in rng.integers(1, D + 1, size=2))
        tokens = rng.integers(0, CONFIG.vocab, size=CONFIG.context)
        res = attention_error_decomposition(w, CONFIG, bank, layer, head, r_v, tokens, r_k=r_k)
        worst = max(worst, abs(res.recombined - res.direct_error) / max(res.direct_error, 1e-300))
    record_property("max_rel_err", f"{worst:.2e}")
    assert worst <= 1e-9


# -- 8 ------------------------------------------------------------------------------


@slow
@criterion(8, "trained bank beats PCA at 37.5% and 50%")
def test_nested_beats_pca(art, record_property):
    pca = {r: art.eval("pca", uniform(r)).perplexity for r in (6, 8)}
    wins = 0
    for seed in SEEDS:
        nested = {r: art.eval(f"nested-{seed}", uniform(r)).perplexity for r in (6, 8)}
        won = all(nested[r] < pca[r] for r in (6, 8))
        wins += won
        record_property(f"seed{seed}", f"ppl@6 {nested[6]:.4f} vs {pca[6]:.4f}, ppl@8 {nested[8]:.4f} vs {pca[8]:.4f}")
    record_property("teacher_ppl", f"{art.eval('pca', uniform(D)).perplexity:.4f}")
    assert wins >= 2


# -- 9 ------------------------------------------------------------------------------


@slow
@criterion(9, "searched allocation beats uniform at 37.5%")
def test_search_beats_uniform(art, record_property):
    bank = art.bank("nested-0")
    prompts = list(chunks(art.corpus.train[len(art.corpus.train) // 2 :], CONFIG.context, 8))
    calib = Calibration.build(art.weights, CONFIG, prompts)
    gamma = 0.375
    result = search_with_trace(art.weights, CONFIG, bank, SearchConfig.for_model(CONFIG, gamma), calib)
    uni = uniform_allocation(gamma, CONFIG)
    kl_s = calib_kl(art.weights, CONFIG, bank, result.allocation, calib)
    kl_u = calib_kl(art.weights, CONFIG, bank, uni, calib)
    ppl_s = art.eval("nested-0", result.allocation).perplexity
    ppl_u = art.eval("nested-0", uni).perplexity
    record_property("budget", f"searched {result.budget:.4f} uniform {budget(uni, CONFIG):.4f}")
    record_property("calib_kl", f"searched {kl_s:.5f} uniform {kl_u:.5f}")
    record_property("perplexity", f"searched {ppl_s:.4f} uniform {ppl_u:.4f}")
    record_property("mean_fraction", f"K {result.allocation.r_k.mean() / D:.3f} V {result.allocation.r_v.mean() / D:.3f}")
    assert kl_s <= kl_u
    assert ppl_s <= ppl_u * 1.02


# -- 10 -----------------------------------------------------------------------------


@slow
@criterion(10, "nested-rank training vs fixed-rank training")
def test_fixed_rank_worse_at_low_rank(art, record_property):
    fixed = art.eval("fixed-0", uniform(D // 8)).kd
    nested = art.eval("nested-0", uniform(D // 8)).kd
    record_property("kd@d/8", f"fixed {fixed:.5f} nested {nested:.5f}")
    assert fixed > nested


@slow
@criterion(10, "nested-rank training vs fixed-rank training")
def test_fixed_rank_no_gain_beyond_training_rank(art, record_property):
    half = art.eval("fixed-0", uniform(D // 2))
    full = art.eval("fixed-0", uniform(D))
    gain = (half.kd - full.kd) / half.kd
    record_property("fixed_kd", f"d/2 {half.kd:.5f} full {full.kd:.5f} gain {gain:.1%}")
    record_property("fixed_ppl", f"d/2 {half.perplexity:.4f} full {full.perplexity:.4f}")
    assert gain <= 0.02


@slow
@criterion(10, "nested-rank training vs fixed-rank training")
def test_nested_rank_kd_monotone(art, record_property):
    ranks = Schedule.eighths(D).ranks
    kd = [art.eval("nested-0", uniform(r)).kd for r in ranks]
    record_property("nested_kd", " ".join(f"{r}:{k:.5f}" for r, k in zip(ranks, kd)))
    assert all(b <= a * 1.05 for a, b in zip(kd, kd[1:]))


# -- 11 -----------------------------------------------------------------------------


@slow
@criterion(11, "orthogonality ablation breaks full-rank identity")
def test_no_orthogonality_breaks_identity(art, record_property):
    bank = art.bank("free-0")
    assert not bank.orthogonal
    kd = art.eval("free-0", uniform(D)).kd
    record_property("kd@full", f"{kd:.5f}")
    assert kd > 1e-3


# -- 12 -----------------------------------------------------------------------------


@slow
@criterion(12, "PCA init beats random init")
def test_pca_init_beats_random_init(art, record_property):
    def eval_loss(name):
        r = art.eval(name, uniform(D // 2))
        return TrainConfig.kd_weight * r.kd + TrainConfig.lm_weight * r.cross_entropy

    wins = 0
    for seed in SEEDS:
        rnd, pca = eval_loss(f"random-{seed}"), eval_loss(f"nested-{seed}")
        wins += rnd > pca
        record_property(f"seed{seed}", f"random {rnd:.4f} pca {pca:.4f}")
    assert wins >= 2


# -- 13 -----------------------------------------------------------------------------


def _all_sequences(config, sc):
    """Every sequence of single decrements that respects the floor until the budget drops below gamma."""
    slots = [(k, l, h) for k in "KV" for l in range(config.n_layers) for h in range(config.n_kv_heads)]
    seqs = []

    def walk(alloc, path):
        if path and budget(alloc, config) < sc.gamma:
            seqs.append((alloc, path))
            return
        for k, l, h in slots:
            if alloc.of(k)[l, h] - sc.delta_r >= sc.floor:
                t = alloc.copy()
                t.of(k)[l, h] -= sc.delta_r
                walk(t, path + [(k, l, h)])

    walk(RankAllocation.full(config), [])
    return seqs


@criterion(13, "greedy loop semantics")
def test_greedy_against_brute_force(record_property):
    config = ModelConfig(n_layers=1, n_heads=1, n_kv_heads=1, head_dim=8, vocab=64, context=16, mlp_hidden=32)
    w = make_weights(config, 1)
    rng = np.random.default_rng(2)
    bank = init_bank(w, config, list(rng.integers(0, 64, size=(4, 16))))
    calib = Calibration.build(w, config, list(rng.integers(0, 64, size=(6, 16))))
    memo = {}

    def kl(a):
        key = (a.r_k.tobytes(), a.r_v.tobytes())
        if key not in memo:
            memo[key] = calib_kl(w, config, bank, a, calib)
        return memo[key]

    checked = 0
    for gamma in (1.0, 0.95, 0.875, 0.75, 0.6, 0.5, 0.4, 0.3):
        sc = SearchConfig.for_model(config, gamma)
        res = run_greedy_search(config, sc, kl)
        quantum = sc.delta_r / (2 * config.n_layers * config.n_kv_heads * config.head_dim)
        assert gamma - quantum - 1e-12 <= res.budget < gamma
        assert res.allocation.r_k.min() >= sc.floor and res.allocation.r_v.min() >= sc.floor
        if gamma == 1.0:
            assert res.rounds == 1 and len(res.history) == 1
        # brute force: among all floor-respecting decrement sequences, the one
        # that takes the lowest-KL (then K, layer, head) step every round
        seqs = _all_sequences(config, sc)
        greedy = []
        for alloc, path in seqs:
            cur = RankAllocation.full(config)
            ok = True
            for step in path:
                cands = []
                for k, l, h in [(k, l, h) for k in "KV" for l in range(config.n_layers) for h in range(config.n_kv_heads)]:
                    if cur.of(k)[l, h] - sc.delta_r >= sc.floor:
                        t = cur.copy()
                        t.of(k)[l, h] -= sc.delta_r
                        cands.append((kl(t), "KV".index(k), l, h, (k, l, h)))
                if min(cands)[-1] != step:
                    ok = False
                    break
                cur.of(step[0])[step[1], step[2]] -= sc.delta_r
            if ok:
                greedy.append((alloc, path))
        assert len(greedy) == 1
        assert greedy[0][0] == res.allocation
        assert greedy[0][1] == [h[:3] for h in res.history]
        for alloc, _ in seqs:
            assert gamma - quantum - 1e-12 <= budget(alloc, config) < gamma
        checked += len(seqs)
    record_property("sequences_enumerated", checked)
