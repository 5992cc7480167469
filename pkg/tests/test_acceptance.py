"""Acceptance suite: one test per primary criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion lines.
Every tolerance and runtime budget is pinned here; a criterion that exceeds its
budget fails even if its assertions hold.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from chartir import cli
from chartir.engine import RefinementEngine, RefinementSession
from chartir.gateway import NoRating, OutOfRange, parse_rating
from chartir.harness import REPORT_COLUMNS, judge_score
from chartir.metrics import (
    AggregationWeights,
    DiscrepancyScore,
    MetricVector,
    aggregate,
    compute_mse,
    compute_psnr,
    compute_ssim,
    hamming_distance,
)
from chartir.sandbox import SandboxOrchestrator
from conftest import (
    GOLD_SCRIPTS,
    StubRenderer,
    blend_toward,
    fenced,
    make_gateway,
    random_image,
)
from oracles import mse_oracle, ssim_oracle

SSIM_TOL = 1e-6
MSE_TOL = 1e-9


def _criterion(name: str, budget_s: float, body) -> None:
    started = time.monotonic()
    try:
        body()
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL", flush=True)
        raise
    elapsed = time.monotonic() - started
    within = elapsed < budget_s
    verdict = "PASS" if within else "FAIL (over runtime budget)"
    print(f"[ACCEPTANCE] {name}: {verdict} ({elapsed:.2f}s, budget {budget_s:.0f}s)",
          flush=True)
    assert within, f"{name} took {elapsed:.2f}s, budget {budget_s}s"


def test_metric_oracle_suite():
    def body():
        rng = np.random.default_rng(2024)
        for _ in range(50):
            width = int(rng.integers(8, 33))
            height = int(rng.integers(8, 33))
            a = random_image(rng, width, height)
            b = random_image(rng, width, height)
            assert compute_mse(a, b) == pytest.approx(
                mse_oracle(a.pixels, b.pixels), abs=MSE_TOL
            )
            assert compute_ssim(a, b) == pytest.approx(
                ssim_oracle(a.pixels, b.pixels), abs=SSIM_TOL
            )
        # PSNR identities
        same = random_image(rng, 16, 16)
        assert compute_psnr(same, same) == 50.0
        from chartir.images import ChartImage

        black = ChartImage.solid(16, 16, (0, 0, 0))
        white = ChartImage.solid(16, 16, (255, 255, 255))
        assert compute_psnr(black, white) == 0.0
        # Hamming identity, symmetry, 64-max
        assert hamming_distance(0, 2**64 - 1) == 64
        for _ in range(50):
            h1 = int(rng.integers(0, 2**63))
            h2 = int(rng.integers(0, 2**63))
            assert hamming_distance(h1, h1) == 0
            assert hamming_distance(h1, h2) == hamming_distance(h2, h1)
            assert 0 <= hamming_distance(h1, h2) <= 64

    _criterion("metric oracle suite", 10.0, body)


def test_aggregator_suite():
    def body():
        zero = MetricVector(ssim=1.0, psnr_db=50.0, hamming=0, embed_cos=(1.0,))
        assert aggregate(zero).value == 0.0
        one = MetricVector(ssim=0.0, psnr_db=0.0, hamming=64, embed_cos=(-1.0,))
        assert aggregate(one).value == pytest.approx(1.0, abs=1e-12)

        rng = np.random.default_rng(7)
        for _ in range(100):
            ssim = float(rng.uniform(0.05, 1.0))
            psnr = float(rng.uniform(0.5, 50.0))
            ham = int(rng.integers(0, 64))
            cos = float(rng.uniform(-0.9, 1.0))
            weights = AggregationWeights(
                w_ssim=float(rng.uniform(0.1, 2.0)),
                w_psnr=float(rng.uniform(0.1, 2.0)),
                w_hamming=float(rng.uniform(0.1, 2.0)),
                w_embed=(float(rng.uniform(0.1, 2.0)),),
            )
            base = MetricVector(ssim=ssim, psnr_db=psnr, hamming=ham, embed_cos=(cos,))
            score = aggregate(base, weights).value
            assert aggregate(
                MetricVector(ssim=ssim * 0.9, psnr_db=psnr, hamming=ham, embed_cos=(cos,)),
                weights,
            ).value > score
            assert aggregate(
                MetricVector(ssim=ssim, psnr_db=psnr * 0.9, hamming=ham, embed_cos=(cos,)),
                weights,
            ).value > score
            assert aggregate(
                MetricVector(ssim=ssim, psnr_db=psnr, hamming=ham + 1, embed_cos=(cos,)),
                weights,
            ).value > score
            assert aggregate(
                MetricVector(ssim=ssim, psnr_db=psnr, hamming=ham, embed_cos=(cos - 0.05,)),
                weights,
            ).value > score

        # provider absent: weights renormalize over the remaining components
        weights = AggregationWeights(w_embed=(1.0,))
        present = MetricVector(ssim=0.5, psnr_db=50.0, hamming=0, embed_cos=(0.0,))
        absent = MetricVector(ssim=0.5, psnr_db=50.0, hamming=0, embed_cos=None)
        assert aggregate(present, weights).value == pytest.approx(1.0 / 4.0)
        assert aggregate(absent, weights).value == pytest.approx(0.5 / 3.0)

    _criterion("aggregator suite", 1.0, body)


def test_state_machine_trace_suite(tmp_path):
    def body():
        # (a) never-improving mock, K=3: exactly 3 iterations, final = initial code
        rng = np.random.default_rng(41)
        reference = random_image(rng, 16, 16)
        noise = random_image(rng, 16, 16)
        stage1 = [("describer", "desc"), ("coder", fenced("c0"))]
        images = {"c0": blend_toward(reference, noise, 0.5)}
        entries = stage1 + [("differ", "d"), ("refiner", fenced("c0"))] * 3
        engine = RefinementEngine(
            make_gateway(entries), StubRenderer(images),
            threshold=3, work_root=tmp_path / "a",
        )
        session = engine.run_stage1(reference, "a")
        final = engine.run_stage2(session)
        assert session.iterations == 3
        assert final == "c0"

        # (b) improve twice then plateau, K=2: exactly 4 iterations, final = 2nd candidate
        images = {
            "c0": blend_toward(reference, noise, 0.9),
            "c1": blend_toward(reference, noise, 0.5),
            "c2": blend_toward(reference, noise, 0.2),
        }
        entries = stage1 + [
            ("differ", "d1"), ("refiner", fenced("c1")),
            ("differ", "d2"), ("refiner", fenced("c2")),
            ("differ", "d3"), ("refiner", fenced("c2")),
            ("differ", "d4"), ("refiner", fenced("c2")),
        ]
        engine = RefinementEngine(
            make_gateway(entries), StubRenderer(images),
            threshold=2, work_root=tmp_path / "b",
        )
        session = engine.run_stage1(reference, "b")
        final = engine.run_stage2(session)
        assert session.iterations == 4
        assert final == "c2"
        assert [r.accepted for r in session.history] == [True, True, False, False]

        # (c) best_score non-increasing across 200 randomized mock runs
        for run in range(200):
            ref = random_image(rng, 16, 16)
            nse = random_image(rng, 16, 16)
            threshold = int(rng.integers(1, 4))
            cap = 8
            imgs = {"c0": blend_toward(ref, nse, float(rng.uniform(0.3, 1.0)))}
            script = list(stage1)
            for i in range(1, cap + 1):
                key = f"r{i}"
                imgs[key] = blend_toward(ref, nse, float(rng.uniform(0.0, 1.0)))
                script += [("differ", f"d{i}"), ("refiner", fenced(key))]
            engine = RefinementEngine(
                make_gateway(script), StubRenderer(imgs),
                threshold=threshold, iteration_cap=cap,
                work_root=tmp_path / f"c{run}",
            )
            session = engine.run_stage1(ref, f"c{run}")
            values = [session.best_score.value]
            while not session.convergence.reached and session.iterations < cap:
                engine.step(session)
                values.append(session.best_score.value)
            assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

        # (d) transcript event order matches the two-stage call order exactly
        images = {"c0": blend_toward(reference, noise, 0.5)}
        entries = stage1 + [("differ", "d"), ("refiner", fenced("c0"))] * 2
        engine = RefinementEngine(
            make_gateway(entries), StubRenderer(images),
            threshold=2, work_root=tmp_path / "d",
        )
        session = engine.run_stage1(reference, "d")
        engine.run_stage2(session)
        step = ["prompt", "response", "prompt", "response", "render", "metrics", "decision"]
        expected = (
            ["prompt", "response", "prompt", "response", "render", "metrics"]
            + step * 2
            + ["termination"]
        )
        assert session.transcript.kinds() == expected
        roles = [e["payload"]["role"] for e in session.transcript.of_kind("prompt")]
        assert roles == ["describer", "coder", "differ", "refiner", "differ", "refiner"]

    _criterion("state-machine trace suite", 30.0, body)


def test_debug_loop_suite(tmp_path):
    def body():
        orchestrator = SandboxOrchestrator()
        rng = np.random.default_rng(42)
        reference = random_image(rng, 32, 32)
        broken = "x = undefined_name"
        fix = "import matplotlib.pyplot as plt\nplt.plot([1, 2], [3, 4])\n"

        # injected NameError + fixing mock: one debug attempt, then Success
        engine = RefinementEngine(
            make_gateway([("debugger", fenced(fix))]), orchestrator,
            work_root=tmp_path / "fix",
        )
        session = RefinementSession(item_id="fix", reference=reference)
        code, outcome, attempts = engine.try_render_with_debug(broken, session)
        assert attempts == 1
        assert outcome.ok
        assert code.strip() == fix.strip()
        first_render = session.transcript.of_kind("render")[0]
        assert first_render["payload"]["error_class"] == "NameError"

        # non-fixing mock: exactly max_debug attempts, then recorded failure
        max_debug = 2
        entries = [("debugger", fenced(broken))] * max_debug
        engine = RefinementEngine(
            make_gateway(entries), orchestrator,
            work_root=tmp_path / "nofix", max_debug=max_debug,
        )
        best_image = random_image(rng, 32, 32)
        session = RefinementSession(
            item_id="nofix", reference=reference,
            best_code="keep", best_image=best_image,
            best_score=DiscrepancyScore(0.33),
        )
        code, outcome, attempts = engine.try_render_with_debug(broken, session)
        assert attempts == max_debug
        assert not outcome.ok
        # a failed debug cycle never updates best_*
        assert session.best_code == "keep"
        assert session.best_image is best_image
        assert session.best_score.value == 0.33

    _criterion("debug-loop suite", 30.0, body)


RATING_CASES = [
    ("short explanation... Rating: [[7]]", 7),
    ("Rating: [[3]] ... Rating: [[9]]", 9),
    ("Rating: [[4]] Rating: [[2]]", 2),
    ("Rating: [[1]]", 1),
    ("Rating: [[10]]", 10),
    ("Rating: [[05]]", 5),
    ("The charts match well.\nRating: [[8]]\n", 8),
    ("prefix text Rating: [[6]] suffix", 6),
    ("Rating: [[11]]", OutOfRange),
    ("Rating: [[0]]", OutOfRange),
    ("Rating: [[-2]]", OutOfRange),
    ("Rating: [[10]] Rating: [[12]]", OutOfRange),
    ("no rating here at all", NoRating),
    ("Rating: [5]", NoRating),
    ("rating: [[5]]", NoRating),
    ("Rating:[[5]]", NoRating),
    ("Rating: [[ 5 ]]", NoRating),
    ("[[8]]", NoRating),
    ("", NoRating),
    ("Rating: [[seven]]", NoRating),
]


def test_judge_plumbing():
    def body():
        assert len(RATING_CASES) == 20
        for text, expected in RATING_CASES:
            if isinstance(expected, int):
                assert parse_rating(text) == expected, text
            else:
                with pytest.raises(expected):
                    parse_rating(text)
        rng = np.random.default_rng(5)
        ref = random_image(rng, 8, 8)
        gen = random_image(rng, 8, 8)
        gateway = make_gateway([
            ("judge", "Rating: [[6]]"),
            ("judge", "Rating: [[7]]"),
            ("judge", "Rating: [[8]]"),
        ])
        verdict = judge_score(gateway, ref, gen)
        assert verdict.mean == pytest.approx(7.0)
        # exactly three judge calls per scored item
        assert gateway._backend.playbook.remaining == 0

    _criterion("judge plumbing", 10.0, body)


def test_end_to_end_offline_run(tmp_path):
    def body():
        threshold = 2
        orchestrator = SandboxOrchestrator()
        playbooks = tmp_path / "playbooks"
        playbooks.mkdir()
        manifest_lines = []
        for name, gold in GOLD_SCRIPTS.items():
            workdir = tmp_path / f"goldrender-{name}"
            workdir.mkdir()
            outcome = orchestrator.render(gold, 30000, workdir)
            assert outcome.ok
            image_path = tmp_path / f"{name}.png"
            outcome.image.save_png(image_path)
            code_path = tmp_path / f"{name}.py"
            code_path.write_text(gold, encoding="utf-8")
            entries = [
                {"expect_role": "describer", "response": "a chart"},
                {"expect_role": "coder", "response": fenced(gold)},
            ]
            for _ in range(threshold):
                entries.append({"expect_role": "differ", "response": "no differences"})
                entries.append({"expect_role": "refiner", "response": fenced(gold)})
            (playbooks / f"{name}.jsonl").write_text(
                "\n".join(json.dumps(e) for e in entries), encoding="utf-8"
            )
            manifest_lines.append(json.dumps({
                "id": name, "image": str(image_path), "code": str(code_path),
            }))
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
        run_dir = tmp_path / "run"

        assert cli.main([
            "run", "--manifest", str(manifest), "--out", str(run_dir),
            "--mock", str(playbooks), "--threshold", str(threshold),
        ]) == 0
        for name in GOLD_SCRIPTS:
            assert (run_dir / "out" / name / "final.png").is_file()
            assert (run_dir / "transcripts" / f"{name}.jsonl").is_file()

        assert cli.main(["eval", "--run", str(run_dir)]) == 0
        assert cli.main(["report", "--run", str(run_dir)]) == 0

        header = (run_dir / "report.md").read_text().splitlines()[0]
        positions = [header.index(col) for col in REPORT_COLUMNS]
        assert positions == sorted(positions)

        report = json.loads((run_dir / "report.json").read_text())
        assert len(report["rows"]) == 3
        for row in report["rows"]:
            assert row["text"] == 1.0
            assert row["type"] == 1.0
            assert row["layout"] == 1.0
            assert row["color"] == 1.0

    _criterion("end-to-end offline run", 120.0, body)
