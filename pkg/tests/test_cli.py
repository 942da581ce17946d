import json

import pytest
from PIL import Image

from vlmshap.cli import (
    EXIT_CONFIG,
    EXIT_GATEWAY,
    EXIT_OK,
    EXIT_SCHEMA,
    main,
)

from conftest import build_scene, write_dataset, write_scene_files


@pytest.fixture
def scene_file(tmp_path):
    scene = build_scene(
        (16, 16),
        [
            ("red ball", (1, 1, 8, 6), (220, 30, 30)),
            ("green dog", (2, 8, 9, 15), (30, 220, 30)),
            ("blue hat", (11, 2, 14, 4), (30, 30, 220)),
        ],
    )
    return write_scene_files(scene, tmp_path)


@pytest.fixture
def dataset_file(tmp_path):
    scene_a = build_scene(
        (16, 16),
        [
            ("shiny silver fork", (1, 1, 6, 6), (200, 0, 0)),
            ("plate", (8, 8, 15, 15), (0, 0, 200)),
        ],
    )
    scene_b = build_scene(
        (16, 16),
        [
            ("cat", (0, 0, 9, 9), (0, 150, 0)),
            ("warm knitted wool blanket", (10, 10, 13, 13), (150, 150, 0)),
        ],
    )
    return write_dataset(tmp_path / "data", [(scene_a, 0), (scene_b, 1)])


def attribute_args(scene_file, tmp_path, *extra):
    return [
        "attribute",
        "--scene",
        str(scene_file),
        "--out",
        str(tmp_path / "report.json"),
        "--overlay",
        str(tmp_path / "overlay.png"),
        "--mock",
        *extra,
    ]


class TestAttribute:
    def test_writes_report_and_overlay(self, scene_file, tmp_path):
        assert main(attribute_args(scene_file, tmp_path)) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report) == {
            "phi",
            "ranking",
            "estimator",
            "samples",
            "elapsed_s",
            "fingerprint",
        }
        assert len(report["phi"]) == 3
        assert report["samples"] == 4  # first-order on three objects
        assert report["estimator"] == "mean-diff"
        assert report["elapsed_s"] == 0.0  # pinned for offline runs
        with Image.open(tmp_path / "overlay.png") as overlay:
            assert overlay.size == (16, 16)

    def test_mock_runs_are_byte_identical(self, scene_file, tmp_path):
        first = attribute_args(
            scene_file, tmp_path / "a", "--sampling", "mc", "--seed", "7"
        )
        second = attribute_args(
            scene_file, tmp_path / "b", "--sampling", "mc", "--seed", "7"
        )
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        assert main(first) == EXIT_OK
        assert main(second) == EXIT_OK
        assert (tmp_path / "a" / "report.json").read_bytes() == (
            tmp_path / "b" / "report.json"
        ).read_bytes()
        assert (tmp_path / "a" / "overlay.png").read_bytes() == (
            tmp_path / "b" / "overlay.png"
        ).read_bytes()

    def test_seed_changes_mc_draws(self, scene_file, tmp_path):
        for seed, sub in (("7", "a"), ("8", "b")):
            (tmp_path / sub).mkdir()
            assert (
                main(
                    attribute_args(
                        scene_file,
                        tmp_path / sub,
                        "--sampling",
                        "mc",
                        "--mc-budget",
                        "2",
                        "--seed",
                        seed,
                    )
                )
                == EXIT_OK
            )
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        assert a["fingerprint"] != b["fingerprint"]

    def test_exact_sampling(self, scene_file, tmp_path):
        assert (
            main(attribute_args(scene_file, tmp_path, "--sampling", "exact"))
            == EXIT_OK
        )
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["samples"] == 8
        assert report["estimator"] == "exact"

    def test_baseline_method_runs_offline(self, scene_file, tmp_path):
        args = attribute_args(scene_file, tmp_path, "--method", "baseline-largest")
        args.remove("--mock")  # baselines never need a gateway at all
        assert main(args) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["estimator"] == "baseline-largest"
        assert report["samples"] == 0
        assert report["elapsed_s"] == 0.0
        assert report["ranking"][0] == 1  # biggest box in the fixture

    def test_dump_perturbations(self, scene_file, tmp_path):
        dump = tmp_path / "dump"
        assert (
            main(
                attribute_args(
                    scene_file, tmp_path, "--dump-perturbations", str(dump)
                )
            )
            == EXIT_OK
        )
        names = sorted(p.name for p in dump.iterdir())
        assert len(names) == 4
        assert all(name.endswith(".png") for name in names)

    def test_exact_over_threshold_exits_config(self, scene_file, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"exact_threshold": 2}))
        code = main(
            attribute_args(
                scene_file,
                tmp_path,
                "--sampling",
                "exact",
                "--config",
                str(config),
            )
        )
        assert code == EXIT_CONFIG
        assert "capped at 2" in capsys.readouterr().err

    def test_missing_scene_exits_config(self, tmp_path):
        assert (
            main(attribute_args(tmp_path / "absent.json", tmp_path)) == EXIT_CONFIG
        )

    def test_malformed_scene_exits_schema(self, tmp_path):
        bad = tmp_path / "scene.json"
        bad.write_text("{broken")
        assert main(attribute_args(bad, tmp_path)) == EXIT_SCHEMA

    def test_bad_scene_annotation_exits_schema(self, tmp_path):
        scene = build_scene((8, 8), [("dot", (1, 1, 3, 3), (9, 9, 9))])
        path = write_scene_files(scene, tmp_path)
        doc = json.loads(path.read_text())
        doc["objects"][0]["segmentation"]["counts"] = [5, 5]
        path.write_text(json.dumps(doc))
        assert main(attribute_args(path, tmp_path)) == EXIT_SCHEMA

    def test_live_mode_needs_endpoint_config(self, scene_file, tmp_path):
        args = attribute_args(scene_file, tmp_path)
        args.remove("--mock")
        assert main(args) == EXIT_CONFIG

    def test_live_mode_names_missing_auth_env(
        self, scene_file, tmp_path, capsys, monkeypatch
    ):
        monkeypatch.delenv("ABSENT_TOKEN", raising=False)
        config = tmp_path / "cfg.json"
        config.write_text(
            json.dumps(
                {
                    "vlm": {
                        "base_url": "https://api.example/v1",
                        "model": "cap",
                        "auth_env": "ABSENT_TOKEN",
                    },
                    "embedder": {
                        "base_url": "https://api.example/v1",
                        "model": "embed",
                    },
                }
            )
        )
        args = attribute_args(scene_file, tmp_path, "--config", str(config))
        args.remove("--mock")
        assert main(args) == EXIT_CONFIG
        assert "ABSENT_TOKEN" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, scene_file, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"tempo": 1}))
        assert (
            main(attribute_args(scene_file, tmp_path, "--config", str(config)))
            == EXIT_CONFIG
        )
        assert "tempo" in capsys.readouterr().err

    def test_flag_overrides_config_sampling(self, scene_file, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"sampling": "exact"}))
        assert (
            main(
                attribute_args(
                    scene_file,
                    tmp_path,
                    "--config",
                    str(config),
                    "--sampling",
                    "first-order",
                )
            )
            == EXIT_OK
        )
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["samples"] == 4

    def test_config_masking_matches_flag(self, scene_file, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"masking": "precise"}))
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        (tmp_path / "c").mkdir()
        main(attribute_args(scene_file, tmp_path / "a", "--config", str(config)))
        main(attribute_args(scene_file, tmp_path / "b", "--masking", "precise"))
        main(attribute_args(scene_file, tmp_path / "c"))
        fp = lambda sub: json.loads(
            (tmp_path / sub / "report.json").read_text()
        )["fingerprint"]
        assert fp("a") == fp("b")
        assert fp("a") != fp("c")  # default strategy differs


class TestEvaluate:
    def evaluate_args(self, dataset_file, out_dir, *extra):
        return [
            "evaluate",
            "--dataset",
            str(dataset_file),
            "--out-dir",
            str(out_dir),
            "--mock",
            *extra,
        ]

    def test_writes_summary_bundle(self, dataset_file, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(self.evaluate_args(dataset_file, out)) == EXIT_OK
        table = capsys.readouterr().out
        assert "Recall@1 (%)" in table
        summary = json.loads((out / "summary.json").read_text())
        assert summary["entries"] == 2
        assert summary["dataset"] == "bench.jsonl"
        assert len(summary["rows"]) == 3
        trace = [
            json.loads(line)
            for line in (out / "trace.jsonl").read_text().splitlines()
        ]
        assert len(trace) == 6  # three methods on two entries
        assert (out / "summary.txt").read_text().rstrip("\n") == table.rstrip("\n")

    def test_method_flag_limits_rows(self, dataset_file, tmp_path):
        out = tmp_path / "results"
        assert (
            main(
                self.evaluate_args(dataset_file, out, "--method", "shapley")
            )
            == EXIT_OK
        )
        summary = json.loads((out / "summary.json").read_text())
        assert [row["method"] for row in summary["rows"]] == ["shapley"]

    def test_multiple_maskings_score_baselines_once(self, dataset_file, tmp_path):
        out = tmp_path / "results"
        code = main(
            self.evaluate_args(
                dataset_file, out, "--masking", "precise,bbox"
            )
        )
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        rows = [(row["method"], row["masking"]) for row in summary["rows"]]
        assert rows == [
            ("shapley", "precise"),
            ("shapley", "bbox"),
            ("baseline-central", "baseline"),
            ("baseline-largest", "baseline"),
        ]

    def test_mock_pins_comp_time(self, dataset_file, tmp_path):
        out = tmp_path / "results"
        main(self.evaluate_args(dataset_file, out))
        summary = json.loads((out / "summary.json").read_text())
        for row in summary["rows"]:
            assert row["comp_time"] == {"mean": 0.0, "se": 0.0}

    def test_unknown_method_exits_config(self, dataset_file, tmp_path, capsys):
        assert (
            main(
                self.evaluate_args(
                    dataset_file, tmp_path / "r", "--method", "psychic"
                )
            )
            == EXIT_CONFIG
        )
        assert "psychic" in capsys.readouterr().err

    def test_unknown_masking_exits_config(self, dataset_file, tmp_path):
        assert (
            main(
                self.evaluate_args(
                    dataset_file, tmp_path / "r", "--masking", "soft"
                )
            )
            == EXIT_CONFIG
        )

    def test_missing_dataset_exits_config(self, tmp_path):
        assert (
            main(self.evaluate_args(tmp_path / "no.jsonl", tmp_path / "r"))
            == EXIT_CONFIG
        )

    def test_malformed_dataset_line_exits_schema(self, dataset_file, tmp_path, capsys):
        dataset_file.write_text(
            dataset_file.read_text() + "{not json\n", encoding="utf-8"
        )
        assert (
            main(self.evaluate_args(dataset_file, tmp_path / "r")) == EXIT_SCHEMA
        )
        assert "line 3" in capsys.readouterr().err


class TestRender:
    def report_path(self, scene_file, tmp_path):
        out = tmp_path / "attr"
        out.mkdir()
        assert main(attribute_args(scene_file, out)) == EXIT_OK
        return out / "report.json"

    def test_renders_from_report(self, scene_file, tmp_path):
        report = self.report_path(scene_file, tmp_path)
        out = tmp_path / "painted.png"
        code = main(
            [
                "render",
                "--scene",
                str(scene_file),
                "--report",
                str(report),
                "--out",
                str(out),
                "--no-annotate",
            ]
        )
        assert code == EXIT_OK
        with Image.open(out) as image:
            assert image.size == (16, 16)

    def test_report_scene_mismatch_exits_schema(self, scene_file, tmp_path):
        report = self.report_path(scene_file, tmp_path)
        doc = json.loads(report.read_text())
        doc["phi"] = doc["phi"][:2]
        doc["ranking"] = [0, 1]
        report.write_text(json.dumps(doc))
        code = main(
            [
                "render",
                "--scene",
                str(scene_file),
                "--report",
                str(report),
                "--out",
                str(tmp_path / "x.png"),
            ]
        )
        assert code == EXIT_SCHEMA

    def test_corrupt_report_exits_schema(self, scene_file, tmp_path):
        report = tmp_path / "report.json"
        report.write_text("{\"phi\": [0.1]}")
        code = main(
            [
                "render",
                "--scene",
                str(scene_file),
                "--report",
                str(report),
                "--out",
                str(tmp_path / "x.png"),
            ]
        )
        assert code == EXIT_SCHEMA

    def test_missing_report_exits_config(self, scene_file, tmp_path):
        code = main(
            [
                "render",
                "--scene",
                str(scene_file),
                "--report",
                str(tmp_path / "none.json"),
                "--out",
                str(tmp_path / "x.png"),
            ]
        )
        assert code == EXIT_CONFIG

    def test_bad_overlay_settings_exit_config(self, scene_file, tmp_path):
        report = self.report_path(scene_file, tmp_path)
        base = [
            "render",
            "--scene",
            str(scene_file),
            "--report",
            str(report),
            "--out",
            str(tmp_path / "x.png"),
        ]
        assert main(base + ["--alpha", "0"]) == EXIT_CONFIG
        assert main(base + ["--colormap", "nope"]) == EXIT_CONFIG
