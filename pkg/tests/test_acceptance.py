"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (the verdict lines are printed
even without ``-s``).
"""

import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from sklearn.metrics import silhouette_score

from claimembed import attention as att
from claimembed import autodiff as ad
from claimembed import data as dp
from claimembed import evaluate as ev
from claimembed import glm
from claimembed import nets
from claimembed import reduce as rd
from claimembed.cli import main
from claimembed.synth import synthetic_dataset
from tests.gradcheck import model_grad_errors, numeric_grad, rel_err
from tests.oracles import three_clusters


@pytest.fixture
def verdict(capsys):
    def record(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}", flush=True)
        assert ok, detail

    return record


# ---------------------------------------------------------------------------
# 1. gradients


def _primitive_cases(r):
    n, k, m = (int(v) for v in r.integers(2, 6, size=3))
    q = int(r.integers(2, 5))
    # each case: (name, build(tensors) -> Tensor, input arrays)
    return [
        ("add", lambda a, b: ad.add(a, b), [r.normal(size=(n, m)), r.normal(size=(1, m))]),
        ("sub", lambda a, b: ad.sub(a, b), [r.normal(size=(n, m)), r.normal(size=m)]),
        ("mul", lambda a, b: ad.mul(a, b), [r.normal(size=(n, m)), r.normal(size=(n, 1))]),
        ("matmul", lambda a, b: ad.matmul(a, b), [r.normal(size=(n, k)), r.normal(size=(k, m))]),
        ("batched matmul", lambda a, b: ad.matmul(a, b), [r.normal(size=(2, n, k)), r.normal(size=(k, m))]),
        ("transpose", lambda a: ad.transpose(a), [r.normal(size=(n, m))]),
        ("permute", lambda a: ad.permute(a, (1, 0, 2)), [r.normal(size=(2, n, m))]),
        ("reshape", lambda a: ad.reshape(a, (n * m,)), [r.normal(size=(n, m))]),
        ("broadcast_to", lambda a: ad.broadcast_to(a, (n, m)), [r.normal(size=(1, m))]),
        ("concat", lambda a, b: ad.concat([a, b], axis=-1), [r.normal(size=(n, k)), r.normal(size=(n, m))]),
        ("stack", lambda a, b: ad.stack([a, b], axis=1), [r.normal(size=(n, m)), r.normal(size=(n, m))]),
        ("scale", lambda a: ad.scale(a, 0.37), [r.normal(size=(n, m))]),
        ("relu", lambda a: ad.relu(a), [r.normal(size=(n, m))]),
        ("tanh", lambda a: ad.tanh(a), [r.normal(size=(n, m))]),
        ("sigmoid", lambda a: ad.sigmoid(a), [r.normal(size=(n, m)) * 3]),
        ("softmax", lambda a: ad.softmax_rows(a), [r.normal(size=(n, m)) * 3]),
        ("layer_norm", lambda a, g, b: ad.layer_norm(a, g, b), [r.normal(size=(n, m)) * 2, r.normal(size=m), r.normal(size=m)]),
        ("dropout", lambda a: ad.dropout(a, 0.3, np.random.default_rng(1), True), [r.normal(size=(n, m))]),
        ("embed_lookup", lambda t: ad.embed_lookup(t, np.array([0, 2, 2, 1, m]), frozen_rows=[m]), [r.normal(size=(m + 1, k))]),
        ("mse_loss", lambda a: ad.mse_loss(a, np.ones((n, 1))), [r.normal(size=(n, 1))]),
        (
            "self_attention",
            lambda x, wq, wk, wv: att.self_attention(x, wq, wk, wv),
            [r.normal(size=(2, q, m)), r.normal(size=(m, m)), r.normal(size=(m, m)), r.normal(size=(m, m))],
        ),
    ]


def _primitive_error(name, build, arrays, weights_rng):
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out_shape = build(*tensors).shape
    weights = weights_rng.normal(size=out_shape)

    def loss():
        return ad.sum_all(ad.mul(build(*tensors), weights))

    loss().backward()
    errs = []
    for t in tensors:
        num = numeric_grad(lambda: float(loss().data), t.data)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        if name == "embed_lookup":
            # the frozen last row gets no gradient by design
            if grad[-1].any():
                return np.inf
            grad, num = grad[:-1], num[:-1]
        if np.linalg.norm(num) == 0 and np.linalg.norm(grad) == 0:
            errs.append(0.0)
        else:
            errs.append(rel_err(grad, num))
    return max(errs)


MODEL_KINDS = {
    "mlp-1d": lambda r: (nets.EmbeddingNetRegressor, {"embedding_dim": "one"}),
    "mlp-multid": lambda r: (nets.EmbeddingNetRegressor, {"embedding_dim": ["half", 2, 3][int(r.integers(3))]}),
    "simple-attention": lambda r: (att.SimpleAttentionRegressor, {"embedding_dim": int(r.choice([2, 4])), "n_heads": int(r.choice([1, 2])), "value_projection": bool(r.integers(2))}),
    "tabtransformer": lambda r: (
        att.TabTransformerRegressor,
        {"embedding_dim": int(r.choice([2, 3])), "column_dim": int(r.choice([1, 2])), "depth": int(r.choice([1, 2])), "ffn_multiplier": int(r.choice([1, 4]))},
    ),
}


def test_criterion_1_gradients(verdict):
    start = time.perf_counter()
    worst_primitive, n_primitive_cases = 0.0, 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        for name, build, arrays in _primitive_cases(r):
            err = _primitive_error(name, build, arrays, r)
            n_primitive_cases += 1
            if err > worst_primitive:
                worst_primitive, worst_name = err, f"{name} (config {seed})"

    worst_model, n_models = 0.0, 0
    for kind, draw in MODEL_KINDS.items():
        for seed in range(5):
            r = np.random.default_rng(100 + seed)
            cls, kw = draw(r)
            ds, _ = synthetic_dataset(300, seed=int(r.integers(1000)))
            features = ev.feature_set(ds, "full")
            model = cls(
                numeric=features.numeric,
                categorical=features.categorical,
                exposure=features.exposure,
                log_columns=features.log_columns,
                max_epochs=2,
                patience=1,
                batch_size=100,
                random_state=seed,
                **kw,
            ).fit(ds.frame, ds.y)
            rows = r.choice(ds.n_rows, 20, replace=False)
            errors = model_grad_errors(model, ds.frame.iloc[rows].reset_index(drop=True), ds.y[rows])
            n_models += 1
            if max(errors.values()) > worst_model:
                worst_model = max(errors.values())
                worst_model_name = f"{kind} {kw} -> {max(errors, key=errors.get)}"
    elapsed = time.perf_counter() - start
    ok = worst_primitive < 1e-4 and worst_model < 1e-4 and elapsed < 120
    verdict(
        1,
        ok,
        f"{n_primitive_cases} primitive checks over 20 configs, worst rel err {worst_primitive:.2e} ({worst_name}); "
        f"{n_models} model configs, worst {worst_model:.2e} ({worst_model_name}); {elapsed:.1f}s (limit 120s)",
    )


# ---------------------------------------------------------------------------
# 2. GLM oracles


def test_criterion_2_glm(verdict):
    start = time.perf_counter()
    worst = 0.0
    worst_cond = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        p = int(r.integers(1, 9))
        n = int(r.integers(4 * p + 10, 300))
        X = r.normal(size=(n, p)) * r.uniform(0.5, 3.0, size=p) + r.normal(size=p)
        y = X @ r.normal(size=p) + r.normal(size=n)
        A = np.column_stack([np.ones(n), X])
        worst_cond = max(worst_cond, np.linalg.cond(A))
        fit = glm.fit_iwls(glm.GlmSpec("gaussian", "identity"), X, y)
        normal_eq = np.linalg.solve(A.T @ A, A.T @ y)
        worst = max(worst, float(np.max(np.abs(fit.coef - normal_eq))))

    truth = np.array([3.0, 0.5, -0.2])
    covered = 0
    for seed in range(100):
        r = np.random.default_rng(10_000 + seed)
        x = r.normal(size=(10_000, 2))
        mu = np.exp(truth[0] + x @ truth[1:])
        y = r.gamma(2.0, mu / 2.0)
        fit = glm.fit_iwls(glm.GlmSpec("gamma", "log"), x, y)
        covered += bool(fit.converged and (np.abs(fit.coef - truth) < 3 * fit.standard_errors).all())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and covered >= 95 and elapsed < 120
    verdict(
        2,
        ok,
        f"gaussian vs normal equations max |diff| {worst:.1e} (limit 1e-8, max cond {worst_cond:.0f}); "
        f"gamma all coefficients within 3 SE in {covered}/100 replicates (need 95); {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. encoding goldens and parameter counts

STATES = ["CA", "MD", "ND", "UT", "WA"]
ONE_HOT_GOLDEN = [
    [1, 0, 0, 0, 0],
    [0, 1, 0, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [0, 0, 0, 0, 1],
]
DUMMY_GOLDEN = [
    [0, 0, 0, 0],
    [1, 0, 0, 0],
    [0, 1, 0, 0],
    [0, 0, 1, 0],
    [0, 0, 0, 1],
]


def _random_schema(r):
    n_num = int(r.integers(0, 4))
    cards = [int(c) for c in r.integers(2, 9, size=int(r.integers(1, 5)))]
    n = 300
    cols = {f"x{j}": r.normal(size=n) for j in range(n_num)}
    for j, c in enumerate(cards):
        levels = np.array([f"l{k}" for k in range(c)])
        cols[f"c{j}"] = np.concatenate([levels, r.choice(levels, n - c)])
    return pd.DataFrame(cols), n_num, cards


def test_criterion_3_encodings(verdict):
    vocab = dp.Vocabulary.build("state", STATES)
    one_hot = dp.encode_one_hot(STATES, vocab)
    dummy = dp.encode_dummy(STATES, vocab)
    goldens = (
        vocab.labels == tuple(STATES)
        and vocab.baseline == "CA"
        and one_hot.tolist() == ONE_HOT_GOLDEN
        and dummy.tolist() == DUMMY_GOLDEN
    )

    mismatches = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        frame, n_num, cards = _random_schema(r)
        numeric = [c for c in frame if c.startswith("x")]
        categorical = [c for c in frame if c.startswith("c")]
        y = r.gamma(2.0, 1.0, len(frame))
        dummy_glm = glm.GlmRegressor(numeric=numeric, categorical=categorical).fit(frame, y)
        dummy_width = dummy_glm._design(frame)[0].shape[1] + 1
        one_hot_width = sum(dp.encode_one_hot(frame[c], dp.Vocabulary.build(c, frame[c])).shape[1] for c in categorical)
        tables = {
            c: nets.EmbeddingTable(dp.Vocabulary.build(c, frame[c]), r.normal(size=(card + 1, 1)))
            for c, card in zip(categorical, cards)
        }
        embed_glm = glm.GlmRegressor(numeric=numeric, categorical=categorical, embeddings=tables).fit(frame, y)
        embed_width = embed_glm._design(frame)[0].shape[1] + 1
        counts = (
            dummy_glm.n_parameters_ == glm.param_count_dummy(n_num, cards) == dummy_width,
            embed_glm.n_parameters_ == glm.param_count_embedding(n_num, len(cards)) == embed_width,
            one_hot_width == sum(cards),
        )
        if not all(counts):
            mismatches.append(seed)
    verdict(
        3,
        goldens and not mismatches,
        f"five-state one-hot/dummy goldens {'match' if goldens else 'DIFFER'}; parameter counts match design widths on {50 - len(mismatches)}/50 random schemas",
    )


# ---------------------------------------------------------------------------
# 4. attention invariants


def test_criterion_4_attention(verdict):
    worst_rowsum, worst_perm, exact_means, worst_mean_dev = 0.0, 0.0, 0, 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        q, d = int(r.integers(1, 9)), int(r.integers(1, 17))
        magnitude = float(10 ** r.uniform(-2, 1.5))
        x = r.normal(size=(3, q, d)) * magnitude
        wq, wk, wv = (r.normal(size=(d, d)) for _ in range(3))

        weights = ad.softmax_rows(att.attention_scores(x[0] @ wq, x[0] @ wk)).data
        worst_rowsum = max(worst_rowsum, float(np.max(np.abs(weights.sum(axis=1) - 1))))

        values = x[0]
        zero = att.attention_apply(np.zeros((q, q)), values).data
        uniform = ad.softmax_rows(ad.Tensor(np.zeros((q, q)))).data
        column_means = np.broadcast_to(values.sum(axis=0) / q, (q, d))
        exact_means += bool((uniform == 1.0 / q).all() and np.array_equal(zero, np.full((q, q), 1.0 / q) @ values))
        worst_mean_dev = max(worst_mean_dev, float(np.max(np.abs(zero - column_means)) / max(1.0, np.max(np.abs(values)))))

        perm = r.permutation(q)
        tensors = [ad.Tensor(w) for w in (wq, wk, wv)]
        out = att.self_attention(ad.Tensor(x), *tensors).data
        permuted = att.self_attention(ad.Tensor(x[:, perm]), *tensors).data
        worst_perm = max(worst_perm, float(np.max(np.abs(permuted[:, np.argsort(perm)] - out))))
    ok = worst_rowsum < 1e-12 and exact_means == 50 and worst_mean_dev < 1e-14 and worst_perm < 1e-10
    verdict(
        4,
        ok,
        f"row-sum error {worst_rowsum:.1e} (limit 1e-12); zero scores give uniform 1/q weights exactly in {exact_means}/50 "
        f"(column-mean deviation {worst_mean_dev:.1e}); permutation error {worst_perm:.1e} (limit 1e-10)",
    )


# ---------------------------------------------------------------------------
# 5. unseen-level imputation


def _sorted_lower_median(column):
    ordered = sorted(column)
    return ordered[(len(ordered) - 1) // 2]


def test_criterion_5_unseen_imputation(verdict):
    failures, odd, even = [], 0, 0
    for seed in range(1000):
        r = np.random.default_rng(seed)
        n, dim = int(r.integers(1, 41)), int(r.integers(1, 7))
        w = r.normal(size=(n + 1, dim))
        if seed % 3 == 0:
            w = np.round(w, 1)  # ties
        vocab = dp.Vocabulary.build("v", [f"l{k:02d}" for k in range(n)])
        table = nets.impute_unseen({"v": nets.EmbeddingTable(vocab, w.copy())})["v"]
        expected = [_sorted_lower_median(w[:n, j].tolist()) for j in range(dim)]
        if table.weights[-1].tolist() != expected or not np.array_equal(table.weights[:-1], w[:-1]):
            failures.append(seed)
        odd += n % 2
        even += 1 - n % 2
    worked = nets.impute_unseen(
        {"occ": nets.EmbeddingTable(dp.Vocabulary.build("occ", list("1234")), np.array([[0.2], [0.5], [0.9], [1.4], [9.0]]))}
    )["occ"].weights[-1, 0]
    odd_example = nets.lower_median(np.array([1.0, 2.0, 3.0]))
    ok = not failures and worked == 0.5 and odd_example == 2.0
    verdict(
        5,
        ok,
        f"{1000 - len(failures)}/1000 tables match the sort oracle ({odd} odd, {even} even counts); "
        f"[0.2, 0.5, 0.9, 1.4] -> {worked}; [1, 2, 3] -> {odd_example}",
    )


# ---------------------------------------------------------------------------
# 6. t-SNE


def test_criterion_6_tsne(verdict):
    start = time.perf_counter()
    worst_perp, kl_drops, runs, silhouettes = 0.0, 0, 0, []
    for data_seed in range(3):
        X, labels = three_clusters(data_seed)
        for perplexity in (2.0, 3.0, 5.0, 10.0):
            res = rd.tsne(X, rd.TsneConfig(perplexity=perplexity, seed=data_seed))
            runs += 1
            worst_perp = max(worst_perp, float(np.max(np.abs(res.perplexities - perplexity) / perplexity)))
            kl_drops += res.final_kl < res.initial_kl
            if perplexity == 5.0:
                silhouettes.append(silhouette_score(res.embedding, labels))
    elapsed = time.perf_counter() - start
    ok = worst_perp <= 1e-3 and kl_drops == runs and min(silhouettes) > 0.5 and elapsed < 180
    verdict(
        6,
        ok,
        f"worst perplexity error {100 * worst_perp:.4f}% (limit 0.1%); KL decreased in {kl_drops}/{runs} runs; "
        f"three-cluster silhouette at perplexity 5: {', '.join(f'{s:.3f}' for s in silhouettes)} (need > 0.5); {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 7. PCA


def test_criterion_7_pca(verdict):
    worst_ortho, worst_recon, monotone = 0.0, 0.0, 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        n, dim = int(r.integers(3, 80)), int(r.integers(1, 12))
        X = r.normal(size=(n, dim)) * r.uniform(0.1, 10, size=dim) + r.normal(size=dim) * 5
        res = rd.pca(X)
        k = len(res.variances)
        worst_ortho = max(worst_ortho, float(np.max(np.abs(res.components @ res.components.T - np.eye(k)))))
        monotone += bool((np.diff(res.variances) <= 0).all())
        full = rd.pca(X, min(dim, n - 1))
        worst_recon = max(worst_recon, float(np.max(np.abs(full.projected @ full.components + full.mean - X))))
    ok = worst_ortho < 1e-10 and monotone == 50 and worst_recon < 1e-8
    verdict(
        7,
        ok,
        f"orthonormality error {worst_ortho:.1e} (limit 1e-10); variances non-increasing in {monotone}/50; "
        f"reconstruction error {worst_recon:.1e} (limit 1e-8)",
    )


# ---------------------------------------------------------------------------
# 8. end-to-end synthetic ladder


def _mean_rmse(model, dataset, seed, config=None):
    return ev.cross_validate(ev.ExperimentSpec(model, 5, seed, config or {}), dataset).mean.rmse


def test_criterion_8_synthetic_ladder(verdict):
    start = time.perf_counter()
    data0, _ = synthetic_dataset(50_000, seed=0)
    dummy = _mean_rmse("glm-dummy", data0, 0)
    mlp_1d = _mean_rmse("mlp-1d", data0, 0)
    embed = _mean_rmse("glm-embed", data0, 0)
    oracle = _mean_rmse("glm-dummy", data0, 0, {"granularity": "full"})
    a = mlp_1d < dummy
    b = embed <= 1.05 * oracle

    wins = []
    for seed in range(5):
        data = data0 if seed == 0 else synthetic_dataset(50_000, seed=seed)[0]
        attention = _mean_rmse("simple-attention", data, seed)
        multid = _mean_rmse("mlp-multid", data, seed)
        wins.append((seed, attention, multid))
    n_wins = sum(att_rmse < multid for _, att_rmse, multid in wins)
    c = n_wins >= 4

    ctx, _, _ = ev.contextual_comparison(data0, sample_size=10_000, seed=0)
    d = ctx.contextual.rmse < ctx.static.rmse
    elapsed = time.perf_counter() - start
    ok = a and b and c and d and elapsed < 900
    verdict(
        8,
        ok,
        f"(a) mlp-1d {mlp_1d:,.0f} vs glm-dummy {dummy:,.0f} {'ok' if a else 'FAIL'}; "
        f"(b) glm-embed {embed:,.0f} vs 1.05 x oracle {oracle:,.0f} {'ok' if b else 'FAIL'}; "
        f"(c) simple-attention beat mlp-multid in {n_wins}/5 seeds "
        f"[{'; '.join(f'{s}: {x:,.0f} vs {y:,.0f}' for s, x, y in wins)}] {'ok' if c else 'FAIL'}; "
        f"(d) contextual {ctx.contextual.rmse:,.0f} vs static {ctx.static.rmse:,.0f} {'ok' if d else 'FAIL'}; "
        f"{elapsed:.0f}s (limit 900s)",
    )


# ---------------------------------------------------------------------------
# 9. determinism

QUICK_CONFIG = """\
max_epochs = 2
patience = 1
mlp-multid.embedding_dim = 4
simple-attention.embedding_dim = 4
tabtransformer.embedding_dim = 4
"""


def _run_all_commands(root: Path) -> dict[str, bytes]:
    root.mkdir()
    cfg = root / "quick.cfg"
    cfg.write_text(QUICK_CONFIG)
    data = root / "claims.csv"
    commands = [
        ["synth", "--rows", "2000", "--out", data, "--truth", root / "truth.csv", "--seed", "5"],
        ["prepare", data, "--out", root / "prepared.csv", "--start", "2000", "--end", "2019", "--sample", "800", "--summary-dir", root / "summary", "--seed", "5"],
        ["split", data, "--out", root / "splits.csv", "--seed", "5"],
        ["fit", data, "--model", "glm-dummy", "--out-dir", root / "fit-glm", "--seed", "5"],
        ["fit", data, "--model", "mlp-multid", "--out-dir", root / "fit-net", "--config", cfg, "--seed", "5"],
        ["fit", data, "--model", "tabtransformer", "--out-dir", root / "fit-tab", "--config", cfg, "--seed", "5"],
        ["cv", data, "--model", "glm-embed", "--out", root / "cv.csv", "--config", cfg, "--seed", "5"],
        ["ladder", data, "--models", "linear-benchmark,glm-dummy,mlp-1d,simple-attention", "--out", root / "ladder.csv", "--table", root / "ladder.txt", "--config", cfg, "--seed", "5"],
        ["export-embeddings", data, "--model", "mlp-multid", "--out", root / "emb.csv", "--config", cfg, "--seed", "5"],
        ["reduce", root / "emb.csv", "--variable", "floodZone", "--method", "pca", "--group", "prefix", "--out-dir", root / "pca", "--seed", "5"],
        ["reduce", root / "emb.csv", "--variable", "floodZone", "--method", "tsne", "--perplexity", "3", "--steps", "300", "--out-dir", root / "tsne", "--seed", "5"],
        ["contextual", data, "--sample", "300", "--out", root / "ctx.csv", "--embeddings-out", root / "ctx-rows.csv", "--config", cfg, "--seed", "5"],
    ]
    runner = CliRunner()
    for args in commands:
        result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert result.exit_code == 0, (args[0], result.output)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(verdict, tmp_path):
    first = _run_all_commands(tmp_path / "a")
    second = _run_all_commands(tmp_path / "b")
    differing = sorted(name for name in first if first[name] != second.get(name))
    n_csv = sum(name.endswith(".csv") for name in first)
    ok = set(first) == set(second) and not differing
    verdict(
        9,
        ok,
        f"{len(first)} output files ({n_csv} CSV) from 12 commands; byte-identical on rerun: "
        f"{'all' if not differing else 'NOT ' + ', '.join(differing)}",
    )


def test_criterion_10_real_data(capsys):
    with capsys.disabled():
        print("\nSKIP criterion 10: optional networked check on public claims data, not run offline", flush=True)
    pytest.skip("needs network access; non-gating")
