"""Acceptance suite: one test per release criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see one PASS/FAIL line
per criterion. The planted-signal criteria drive the full three-stage
pipeline on the desk fixture (2,000 patients, 100 codes, 50 observations)
for three seeds, so this module takes several minutes on one core.
"""

import copy
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from trace_seq import cli
from trace_seq import numkit as nk
from trace_seq.autoencoder import reconstruction_loss, transformer_encode
from trace_seq.cohort import greedy_match, stratified_split
from trace_seq.config import load_config
from trace_seq.ehr import PatientRecord, load_cohort, vectorize_visit
from trace_seq.evaluate import auprc, backproject_attention
from trace_seq.pipeline import run_stage

from test_evaluate import brute_force_auprc
from toys import (
    op_gradient_cases,
    toy_autoencoder,
    toy_patient_inputs,
    toy_sequences,
    toy_space,
    toy_trace_model,
)

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"
PREVALENCE = 1 / 7


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {name}: FAIL")
        raise
    print(f"\nACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# desk fixture: full three-stage pipeline, three seeds


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for seed in (0, 1, 2):
        out = root / f"seed{seed}"
        cfg = load_config(DESK_CONFIG, seed=seed, out_dir=str(out))
        started = time.perf_counter()
        for stage in ("gen-cohort", "pretrain-codes", "pretrain-autoencoder", "train", "evaluate"):
            run_stage(stage, cfg)
        pipeline_seconds = time.perf_counter() - started
        lr_cfg = copy.deepcopy(cfg)
        lr_cfg.train.variant = "LR"
        run_stage("train", lr_cfg)
        runs[seed] = {"out": out, "cfg": cfg, "pipeline_seconds": pipeline_seconds}
    # seed-0 extras: the RNN baseline and the three ablation variants
    cfg0 = runs[0]["cfg"]
    rnn_cfg = copy.deepcopy(cfg0)
    rnn_cfg.train.variant = "RNN"
    run_stage("train", rnn_cfg)
    relu_cfg = copy.deepcopy(cfg0)
    relu_cfg.autoencoder.encoder = "relu"
    run_stage("pretrain-autoencoder", relu_cfg)
    for variant in ("TRACE_base", "RACE", "RACE_base"):
        c = copy.deepcopy(cfg0)
        c.train.variant = variant
        c.train.epochs = 4
        run_stage("train", c)
    return runs


def _metrics(out: Path, variant: str) -> dict:
    return json.loads((out / f"metrics_{variant}.json").read_text())


# ---------------------------------------------------------------------------
# criteria


class TestGradientFidelity:
    def test_gradient_fidelity(self):
        with criterion("gradient-fidelity"):
            started = time.perf_counter()

            # (a) every differentiable op in isolation
            for name, loss_fn, params, tol in op_gradient_cases():
                report = nk.finite_diff_check(loss_fn, params, h=1e-5)
                assert report.max_rel_error < tol, (name, report.worst())

            # (b) the full autoencoder loss on a 2-patient / 2-visit / n=20 toy
            space = toy_space()
            assert space.dim == 20
            ae_params, _ = toy_autoencoder(space, seed=1, dropout=0.0)
            data = toy_sequences(space, n_patients=2, n_visits=2, seed=13)

            def ae_loss():
                total = None
                for vecs, _ in data:
                    li, _ = reconstruction_loss(vecs, ae_params, space, mode="eval")
                    total = li if total is None else nk.add(total, li)
                return nk.smul(total, 0.5)

            report = nk.finite_diff_check(ae_loss, ae_params.params(), h=1e-5)
            assert report.max_rel_error < 1e-4, report.worst()

            # (c) the full joint-attention model loss on the same toy
            model, _, alignment = toy_trace_model(space, seed=18)
            inputs = toy_patient_inputs(space, alignment, n_patients=2, n_visits=2, seed=19)
            labels = np.array([pi.label for pi in inputs], dtype=float)

            def trace_loss():
                preds = [nk.reshape(model.forward(pi, mode="eval"), (1,)) for pi in inputs]
                return nk.bce(nk.concat(preds), nk.constant(labels))

            report = nk.finite_diff_check(trace_loss, model.params(), h=1e-5)
            assert report.max_rel_error < 1e-4, report.worst()

            elapsed = time.perf_counter() - started
            assert elapsed < 120, f"gradient checks took {elapsed:.0f}s"


class TestMetricOracles:
    def test_metric_oracles(self):
        with criterion("metric-oracles"):
            rng = np.random.default_rng(1)
            for _ in range(1000):
                n = int(rng.integers(2, 11))
                labels = rng.integers(0, 2, size=n).astype(float)
                if labels.sum() in (0, n):
                    labels[0], labels[-1] = 1.0, 0.0
                scores = np.round(rng.random(n), 1)
                assert auprc(labels, scores) == pytest.approx(
                    brute_force_auprc(labels, scores), abs=1e-12
                )
            assert auprc([1, 0, 1], [0.9, 0.8, 0.3]) == pytest.approx(
                (1.0 + 2 / 3) / 2, abs=1e-12
            )
            big = np.random.default_rng(2)
            labels = (big.random(100_000) < PREVALENCE).astype(float)
            scores = big.random(100_000)
            assert abs(auprc(labels, scores) - 0.1429) < 0.02


class TestOptimizerOracle:
    def test_optimizer_oracle(self):
        with criterion("optimizer-oracle"):
            p = nk.Param("p", np.array(0.0))
            p.grad = np.array(1.0)
            nk.adadelta_step([p], rho=0.95, eps=1e-6, lr=1.0)
            assert abs(float(p.data) - (-4.4721e-3)) < 1e-7


class TestMatchingContract:
    def test_matching_contract(self):
        with criterion("matching-contract"):
            rng = np.random.default_rng(3)
            cases = [f"case{i}" for i in range(10)]
            controls = [f"ctl{i:02d}" for i in range(60)]
            scores = {c: float(rng.uniform(0.2, 0.8)) for c in cases + controls}
            match = greedy_match(cases, controls, scores, k=6)
            used = [c for _, c, _ in match.pairs]
            assert len(used) == len(set(used)) == 60
            assert all(len(v) == 6 for v in match.table.values())

            # exact greedy replay on a 3x12 instance with k=2
            cases = [f"c{i}" for i in range(3)]
            controls = [f"k{i:02d}" for i in range(12)]
            scores = {c: float(rng.uniform(0.2, 0.8)) for c in cases + controls}
            match = greedy_match(cases, controls, scores, k=2)

            def logit(p):
                return float(np.log(p / (1 - p)))

            unused = set(controls)
            replay = []
            for case in sorted(cases, key=lambda i: (-scores[i], i)):
                for _ in range(2):
                    best = min(
                        unused,
                        key=lambda c: (abs(logit(scores[c]) - logit(scores[case])), c),
                    )
                    unused.discard(best)
                    replay.append((case, best))
            assert [(a, b) for a, b, _ in match.pairs] == replay


class TestSplitContract:
    def test_split_contract(self):
        with criterion("split-contract"):
            patients = [
                PatientRecord(f"case{i:06d}", "w", "F", (), 1) for i in range(21_113)
            ] + [
                PatientRecord(f"ctl{i:06d}", "w", "F", (), 0) for i in range(126_678)
            ]
            split = stratified_split(patients, (0.75, 0.10, 0.15), seed=0)
            counts = {"train": 0, "valid": 0, "test": 0}
            for s in split.values():
                counts[s] += 1
            assert counts == {"train": 110_842, "valid": 14_778, "test": 22_171}


class TestAutoencoderConvergence:
    def test_autoencoder_convergence(self):
        with criterion("autoencoder-convergence"):
            space = toy_space()
            params, _ = toy_autoencoder(space, seed=1, dropout=0.0)
            plist = params.params()
            seqs = [s for s, _ in toy_sequences(space, n_patients=8, n_visits=2, seed=0)]
            losses = []
            for _ in range(500):
                with nk.Tape() as tape:
                    total = None
                    for s in seqs:
                        li, _ = reconstruction_loss(s, params, space, mode="train")
                        total = li if total is None else nk.add(total, li)
                    total = nk.smul(total, 1 / len(seqs))
                nk.backward(tape, total)
                nk.adadelta_step(plist)
                losses.append(float(total.data))
            assert losses[-1] <= 0.1 * losses[0], (losses[0], losses[-1])

            vis = toy_autoencoder(space, seed=2)[0].encoder.visit
            rng = np.random.default_rng(4)
            z = rng.normal(size=(5, 8))
            perm = rng.permutation(5)
            x1, _ = transformer_encode(z, vis)
            x2, _ = transformer_encode(z[perm], vis)
            np.testing.assert_allclose(x2.data, x1.data[perm], atol=1e-12)


@pytest.mark.slow
class TestPlantedSignal:
    def test_planted_signal_recovery(self, desk_runs):
        with criterion("planted-signal-recovery"):
            floor = PREVALENCE + 0.15
            trace_scores = []
            lr_scores = []
            for seed, run in desk_runs.items():
                trace = _metrics(run["out"], "TRACE")["auprc_test"]
                lr = _metrics(run["out"], "LR")["auprc_test"]
                trace_scores.append(trace)
                lr_scores.append(lr)
                assert trace >= floor, f"seed {seed}: TRACE {trace:.4f} < {floor:.4f}"
            rnn = _metrics(desk_runs[0]["out"], "RNN")["auprc_test"]
            assert rnn >= floor, f"RNN {rnn:.4f} < {floor:.4f}"
            gap = float(np.mean(trace_scores) - np.mean(lr_scores))
            assert gap >= 0.03, f"TRACE-LR mean gap {gap:.4f} < 0.03"
            print(
                f"\n  TRACE={['%.3f' % s for s in trace_scores]} "
                f"LR={['%.3f' % s for s in lr_scores]} RNN={rnn:.3f} gap={gap:.3f}"
            )

    def test_pipeline_wall_clock_budget(self, desk_runs):
        with criterion("pipeline-wall-clock"):
            seconds = desk_runs[0]["pipeline_seconds"]
            assert seconds < 600, f"pipeline took {seconds:.0f}s"
            print(f"\n  full pipeline: {seconds:.0f}s")


@pytest.mark.slow
class TestAblationMachinery:
    def test_ablation_machinery(self, desk_runs):
        with criterion("ablation-machinery"):
            out = desk_runs[0]["out"]
            for variant in ("TRACE_base", "RACE", "RACE_base"):
                m = _metrics(out, variant)
                assert m["auprc_test"] is not None
                assert m["nll_test"] is not None
            trace_names = {
                e["name"]
                for e in json.loads((out / "model_TRACE.json").read_text())["params"]
            }
            race_names = {
                e["name"]
                for e in json.loads((out / "model_RACE.json").read_text())["params"]
            }
            only_trace = trace_names - race_names
            only_race = race_names - trace_names
            assert all(n.startswith("enc.vis.") for n in only_trace), only_trace
            assert all(n.startswith("enc.vis.") for n in only_race), only_race
            assert trace_names & race_names == trace_names - only_trace


@pytest.mark.slow
class TestAttentionExport:
    def test_attention_export(self, desk_runs):
        with criterion("attention-export"):
            # pure back-projection properties
            rng = np.random.default_rng(5)
            w = rng.normal(size=(4, 9))
            names = [f"f{i}" for i in range(9)]
            a1 = rng.dirichlet(np.ones(4), size=4)
            a2 = rng.dirichlet(np.ones(4), size=4)
            m1 = backproject_attention(a1, w, [0], names).full
            m2 = backproject_attention(a2, w, [0], names).full
            m12 = backproject_attention(a1 + a2, w, [0], names).full
            np.testing.assert_allclose(m12, m1 + m2, atol=1e-10)
            ident = backproject_attention(a1, np.eye(4), [0], names[:4]).full
            np.testing.assert_allclose(ident, a1, atol=1e-10)

            # the emitted layout covers exactly the visit's active features
            run = desk_runs[0]
            result = run_stage("export-attention", run["cfg"])
            csv_path = next(p for p in result.outputs if p.suffix == ".csv")
            pid = csv_path.stem.replace("attention_", "")
            patients, space, _, _ = load_cohort(run["out"] / "cohort.jsonl")
            patient = next(p for p in patients if p.id == pid)
            names = space.feature_names()
            per_visit: dict[int, set] = {}
            for line in csv_path.read_text().splitlines()[1:]:
                visit_idx, row_name, col_name, _ = line.split(",")
                per_visit.setdefault(int(visit_idx), set()).update([row_name, col_name])
            visits = patient.visits[-run["cfg"].hyper.max_visits:]
            assert len(per_visit) == len(visits)
            for t, visit in enumerate(visits):
                vec = vectorize_visit(visit, patient, space)
                active = {names[i] for i in np.flatnonzero(vec.concat)}
                assert per_visit[t] == active, f"visit {t} feature mismatch"


class TestDeterminism:
    def test_stage_determinism(self, tmp_path):
        with criterion("determinism"):
            config = tmp_path / "micro.toml"
            config.write_text(
                "seed = 5\n"
                "[cohort]\nn_patients = 200\nn_codes = 24\nn_observations = 6\n"
                "mean_visits = 5.0\nmax_total_visits = 8\n"
                "[pretrain]\nn_patients = 50\nn_codes = 36\ncode_offset = 4\nepochs = 1\n"
                "[autoencoder]\nepochs = 1\n"
                "[train]\nvariant = \"TRACE\"\nepochs = 1\n"
                "[hyper]\ndownsized_dim = 5\nembed_dim = 10\nbatch_size = 50\nmax_visits = 8\n"
            )
            out = tmp_path / "out"
            stages = ("gen-cohort", "pretrain-codes", "pretrain-autoencoder", "train", "evaluate")
            base = ["--config", str(config), "--out", str(out), "--quiet"]
            for stage in stages:
                assert cli.main(base + [stage]) == 0
            first = {
                stage: json.loads((out / f"manifest_{stage}.json").read_text())["outputs"]
                for stage in stages
            }
            metrics_before = (out / "metrics_TRACE.json").read_bytes()
            eval_before = (out / "eval_metrics_TRACE.json").read_bytes()
            for stage in stages:
                assert cli.main(base + [stage]) == 0
                again = json.loads((out / f"manifest_{stage}.json").read_text())["outputs"]
                assert again == first[stage], f"stage {stage} changed outputs on re-run"
            assert (out / "metrics_TRACE.json").read_bytes() == metrics_before
            assert (out / "eval_metrics_TRACE.json").read_bytes() == eval_before
