import json
import shutil

import pytest

from dualprompt import cli
from dualprompt.data import SyntheticSpec
from dualprompt.engine import BASELINE, DUALPROMPT, E_ONLY, G_ONLY
from dualprompt.experiments import (ExperimentConfig, ReportError, ablation_plan, additional_parameters,
                                    cmd_report, contiguous_ranges, default_length_grid, parse_ranges)
from dualprompt.metrics import ScoreMatrix, avg_accuracy, forgetting
from dualprompt.prompting import AttachConfig, ConfigError

SMALL = {
    "backbone": {"num_layers": 5, "embed_dim": 8, "num_heads": 2, "mlp_ratio": 2.0, "image_shape": [4, 4],
                 "patch_shape": [2, 2], "num_pretrain_classes": 3},
    "pretrain": {"epochs": 1, "batch_size": 9},
    "attach": {"g_range": [1, 2], "e_range": [3, 5], "variant": "prot", "g_length": 2, "e_length": 3},
    "train": {"epochs": 1, "batch_size": 8},
    "data": {"synthetic": {"num_tasks": 3, "classes_per_task": 2, "train_per_class": 8, "test_per_class": 4,
                           "grid": 4, "upstream_classes": 3, "upstream_per_class": 6}},
    "seeds": [0],
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = dict(SMALL, output_dir=str(root / "runs"))
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["pretrain", "-c", str(root / "cfg.json")]) == 0
    return root


def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


# ---------------------------------------------------------------- config

def test_default_config_round_trip(tmp_path):
    assert cli.main(["init-config", str(tmp_path / "c.json")]) == 0
    cfg = ExperimentConfig.load(tmp_path / "c.json")
    assert cfg.to_dict() == ExperimentConfig().to_dict()


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"train": {"lr": 0.1, "lrr": 2}},
                                 {"data": {"synthetic": {"grid": 8, "colour": 1}}}, {"version": 99},
                                 {"seeds": []}, {"attach": {"variant": "pret", "g_length": 3}}])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochz": 3}}))
    code, _, err = run_cli(["run", "-c", tmp_path / "c.json"], capsys)
    assert code == cli.EXIT_CODES["config"]
    assert error_of(err)["error"] == "config" and "epochz" in error_of(err)["message"]


def test_usage_error_exit_code(capsys):
    code, _, err = run_cli(["run", "--mode", "nonsense"], capsys)
    assert code == cli.EXIT_CODES["usage"]
    assert error_of(err)["error"] == "usage"


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    cfg = dict(SMALL, output_dir=str(tmp_path))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run_cli(["run", "-c", tmp_path / "c.json"], capsys)
    assert code == cli.EXIT_CODES["io"]
    assert "pretrain" in error_of(err)["message"]


def test_corrupt_checkpoint_exit_code(work, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    data = bytearray((work / "runs/backbone.ckpt").read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad.write_bytes(bytes(data))
    cfg = dict(SMALL, output_dir=str(tmp_path), checkpoint=str(bad))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run_cli(["run", "-c", tmp_path / "c.json"], capsys)
    assert code == cli.EXIT_CODES["checkpoint"]


def test_pretrain_class_count_checked(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL))
    cfg["backbone"]["num_pretrain_classes"] = 7
    cfg["output_dir"] = str(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, _ = run_cli(["pretrain", "-c", tmp_path / "c.json"], capsys)
    assert code == cli.EXIT_CODES["config"]


# ---------------------------------------------------------------- run and report

@pytest.fixture(scope="module")
def dp_run(work):
    out = work / "runs/dp"
    assert cli.main(["run", "-c", str(work / "cfg.json"), "--seeds", "0,1", "--out", str(out)]) == 0
    return out


def test_run_artifacts(dp_run):
    for name in ("config.json", "summary.csv", "summary.txt", "summary.json"):
        assert (dp_run / name).exists(), name
    for seed in (0, 1):
        d = dp_run / f"seed_{seed}"
        for name in ("config.json", "scores.txt", "scores.csv", "oracle_scores.txt", "metrics.json",
                     "prompts.csv", "log.jsonl", "checkpoints/task_3.ckpt"):
            assert (d / name).exists(), name
    rows = json.loads((dp_run / "summary.json").read_text())
    assert rows[0]["seeds"] == 2 and rows[0]["mode"] == DUALPROMPT


def test_metrics_agree_with_scores(dp_run):
    d = dp_run / "seed_0"
    s = ScoreMatrix.load(d / "scores.txt")
    m = json.loads((d / "metrics.json").read_text())
    assert m["avg_accuracy"] == avg_accuracy(s, 3)
    assert m["forgetting"] == forgetting(s, 3)


def test_parameter_count_matches_enumeration(dp_run):
    m = json.loads((dp_run / "seed_0/metrics.json").read_text())
    att = AttachConfig((1, 2), (3, 5), "prot", 2, 3)
    assert m["additional_parameters"] == additional_parameters(att, 8, 3) == 8 * (2 * 2 + (3 * 3 + 1) * 3)


def test_parameter_count_per_mode():
    att = AttachConfig((1, 2), (3, 5), "pret", 10, 40)
    assert additional_parameters(att, 64, 5, BASELINE) == 0
    assert additional_parameters(att, 64, 5, G_ONLY) == 64 * 20
    assert additional_parameters(att, 64, 5, E_ONLY) == 64 * 121 * 5


def test_report_reproduces_run(dp_run, tmp_path, capsys):
    code, out, _ = run_cli(["report", dp_run, "--out", tmp_path], capsys)
    assert code == 0
    rows = json.loads((tmp_path / "report.json").read_text())
    ref = json.loads((dp_run / "summary.json").read_text())[0]
    assert rows[0]["label"] == "dp"
    for key in ("avg_accuracy", "forgetting", "matching_accuracy"):
        assert rows[0][key] == pytest.approx(ref[key], abs=1e-12)
    single = cmd_report([dp_run / "seed_1"])["rows"][0]
    assert single["label"] == "dp" and single["seeds"] == 1


def test_report_rejects_mismatched_task_counts(dp_run, tmp_path):
    other = tmp_path / "other"
    shutil.copytree(dp_run / "seed_0", other)
    s = ScoreMatrix(2, seed=0, mode=DUALPROMPT)
    for t in (1, 2):
        for i in range(1, t + 1):
            s.set(t, i, 50.0)
    s.save(other / "scores.txt")
    with pytest.raises(ReportError):
        cmd_report([dp_run, other])


def test_report_on_empty_dir_is_io_error(tmp_path, capsys):
    code, _, _ = run_cli(["report", tmp_path], capsys)
    assert code == cli.EXIT_CODES["io"]


def test_baseline_mode_run(work, tmp_path):
    assert cli.main(["run", "-c", str(work / "cfg.json"), "--mode", "baseline", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "seed_0/metrics.json").read_text())
    assert m["matching_accuracy"] is None and m["additional_parameters"] == 0


# ---------------------------------------------------------------- sweeps

def test_range_helpers():
    assert len(contiguous_ranges(6)) == 21
    assert parse_ranges("1-2, 5,3-4") == [(1, 2), (5, 5), (3, 4)]
    with pytest.raises(ConfigError):
        parse_ranges("a-b")
    with pytest.raises(ConfigError):
        parse_ranges(",")


def test_exhaustive_position_sweep(work, tmp_path):
    assert cli.main(["sweep-positions", "-c", str(work / "cfg.json"), "--strategy", "exhaustive",
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "positions.csv").read_text().splitlines()
    assert len(lines) - 1 == len(contiguous_ranges(5)) == 15
    best = json.loads((tmp_path / "best.json").read_text())
    header = lines[0].split(",")
    top = dict(zip(header, lines[1].split(",")))
    accs = [float(dict(zip(header, l.split(",")))["val_avg_accuracy"]) for l in lines[1:]]
    assert float(top["val_avg_accuracy"]) == max(accs)
    assert "-".join(map(str, best["e_range"])) == top["e_range"]


def test_explicit_single_range(work, tmp_path):
    assert cli.main(["sweep-positions", "-c", str(work / "cfg.json"), "--strategy", "explicit",
                     "--ranges", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "positions.csv").read_text().splitlines()
    assert len(lines) == 2 and ",1-1," in lines[1]


def test_explicit_needs_ranges(work, capsys):
    code, _, _ = run_cli(["sweep-positions", "-c", work / "cfg.json", "--strategy", "explicit"], capsys)
    assert code == cli.EXIT_CODES["config"]


def test_out_of_range_layers_rejected(work, tmp_path, capsys):
    code, _, _ = run_cli(["sweep-positions", "-c", work / "cfg.json", "--strategy", "explicit",
                          "--ranges", "4-9", "--out", tmp_path], capsys)
    assert code == cli.EXIT_CODES["config"]


def test_heuristic_position_sweep(work, tmp_path):
    assert cli.main(["sweep-positions", "-c", str(work / "cfg.json"), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "positions.txt").read_text()
    assert "e-single" in text and "g-single" in text


def test_length_grid(work, tmp_path):
    assert cli.main(["sweep-lengths", "-c", str(work / "cfg.json"), "--g-grid", "1,2,3,4",
                     "--e-grid", "1,2,3,4", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "lengths.csv").read_text().splitlines()
    assert len(lines) - 1 == 16
    cells = {tuple(l.split(",")[1:3]) for l in lines[1:]}
    assert len(cells) == 16


def test_default_length_grids():
    assert default_length_grid("prot") == (5, 10, 20, 40)
    assert default_length_grid("pret") == (10, 20, 40, 80)


def test_odd_lengths_rejected_under_pret(work, capsys):
    code, _, err = run_cli(["sweep-lengths", "-c", work / "cfg.json", "--variant", "pret",
                            "--g-grid", "2,3", "--e-grid", "4"], capsys)
    assert code == cli.EXIT_CODES["config"]
    assert "[3]" in error_of(err)["message"]


def test_ablation_table(work, tmp_path):
    assert len(ablation_plan()) == 7
    # the fixed single/multi layer choices need six layers; use the 5-layer-safe overrides
    from dualprompt.experiments import cmd_ablate
    cfg = ExperimentConfig.load(work / "cfg.json")
    res = cmd_ablate(cfg, tmp_path, single={"g": (2, 2), "e": (5, 5)}, multi={"g": (1, 2), "e": (3, 5)})
    labels = [r["label"] for r in res["rows"]]
    assert labels == ["baseline", "G", "E", "GE", "G-ML", "E-ML", "GE-ML"]
    assert (tmp_path / "ablation.txt").exists() and (tmp_path / "ablation.csv").exists()
    params = {r["label"]: r["additional_parameters"] for r in res["rows"]}
    assert params["baseline"] == 0 and params["GE-ML"] > params["GE"] > params["E"]


def test_compare_variants(work, tmp_path, capsys):
    code, out, _ = run_cli(["compare-variants", "-c", work / "cfg.json", "--out", tmp_path], capsys)
    assert code == 0
    text = (tmp_path / "variants.txt").read_text()
    assert "prot" in text and "pret" in text
    assert "Pre-T ahead of Pro-T on Average Accuracy: " in text
    rows = json.loads((tmp_path / "variants_metrics.json").read_text())
    assert [(r["g_length"], r["e_length"]) for r in rows] == [(2, 3), (4, 6)]
    for r in rows:
        assert r["avg_accuracy"] is not None and r["forgetting"] is not None
    assert (tmp_path / "prot/seed_0/scores.txt").exists() and (tmp_path / "pret/seed_0/scores.txt").exists()


def test_spec_defaults_are_consistent():
    cfg = ExperimentConfig()
    assert cfg.backbone.num_pretrain_classes == cfg.data.synthetic.upstream_classes
    assert tuple(cfg.backbone.image_shape) == (cfg.data.synthetic.grid,) * 2
    assert isinstance(cfg.data.synthetic, SyntheticSpec)
