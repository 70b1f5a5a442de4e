import json
import re

import pytest

from ecg_tamperlab.cli import COMMANDS, build_parser, main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["generate", "--subjects", "3", "--duration", "8", "--activities", "sitting,walking",
                 "--seed", "1", "--out", str(root)]) == 0
    return root


def minimal_spec(path, **extra):
    spec = {"model": "CNN", "strategy": "Half5050", "repeats": 1, "scale": 0.1, "seed": 2,
            "dataset": {"n_subjects": 3, "duration_s": 10, "activities": ["sitting", "running"]},
            "train": {"epochs": 1, "batch_size": 16}}
    spec.update(extra)
    path.write_text(json.dumps(spec))
    return path


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_exits_zero(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--out", "--jobs", "--verbose"):
        assert flag in out


def test_hidden_flag_not_documented(capsys):
    with pytest.raises(SystemExit):
        main(["gradcheck", "--help"])
    assert "inject" not in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    for argv in (["nope"], [], ["flops", "--scale", "abc"], ["tamper", "--strategy", "zigzag"],
                 ["generate", "--duration", "2"], ["gradcheck", "--scale", "0.5"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1, argv
    capsys.readouterr()


def test_generate_layout_and_determinism(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["records"]) == 6
    assert all((dataset / e["file"]).exists() for e in manifest["records"])
    again = tmp_path / "again"
    code, _, _ = run(["generate", "--subjects", "3", "--duration", "8", "--activities", "sitting,walking",
                      "--seed", "1", "--out", again], capsys)
    assert code == 0
    for f in dataset.iterdir():
        assert (again / f.name).read_bytes() == f.read_bytes()


def test_generate_full_cohort_count(tmp_path, capsys):
    code, _, _ = run(["generate", "--subjects", "2", "--duration", "4", "--out", tmp_path], capsys)
    assert code == 0
    assert len(list(tmp_path.glob("*.csv"))) == 2 * 7


def test_tamper_sporadic20_sidecars(dataset, tmp_path, capsys):
    code, _, _ = run(["tamper", "--data", dataset, "--strategy", "sporadic20", "--seed", "3", "--count", "4",
                      "--render", "2", "--out", tmp_path], capsys)
    assert code == 0
    sidecars = sorted(tmp_path.glob("*.json"))
    assert len(sidecars) == 4
    for side in sidecars:
        spans = json.loads(side.read_text())["spans"]
        assert sum(1 for _, _, src in spans if src == "B") == 4
    assert len(list(tmp_path.glob("*.svg"))) == 2


def test_tamper_half_spans(dataset, tmp_path, capsys):
    assert run(["tamper", "--data", dataset, "--strategy", "half5050", "--count", "1", "--out", tmp_path],
               capsys)[0] == 0
    side = json.loads(next(tmp_path.glob("*.json")).read_text())
    assert side["spans"] == [[0, 1024, "A"], [1024, 2048, "B"]]


def test_tamper_runtime_errors(dataset, tmp_path, capsys):
    code, _, err = run(["tamper", "--data", tmp_path, "--strategy", "aba"], capsys)
    assert code == 2 and "manifest" in err
    single = tmp_path / "single"
    run(["generate", "--subjects", "2", "--duration", "4", "--activities", "sitting,walking", "--out", single],
        capsys)
    manifest = json.loads((single / "manifest.json").read_text())
    manifest["records"] = [e for e in manifest["records"] if e["subject"] == "S01"]
    (single / "manifest.json").write_text(json.dumps(manifest))
    code, _, err = run(["tamper", "--data", single, "--strategy", "aba"], capsys)
    assert code == 2 and "two subjects" in err


def test_run_minimal_spec(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    code, out, _ = run(["run", spec, "--out", tmp_path / "res"], capsys)
    assert code == 0
    assert "CNN Half5050" in out
    assert sorted(p.name for p in (tmp_path / "res").iterdir()) == ["report.csv", "report.json"]
    report = json.loads((tmp_path / "res" / "report.json").read_text())
    assert report["schema_version"] == 1 and len(report["reports"][0]["runs"]) == 1


def test_run_twice_identical(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    for d in ("a", "b"):
        assert run(["run", spec, "--out", tmp_path / d], capsys)[0] == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_run_dry_run_writes_nothing(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    code, out, _ = run(["run", spec, "--dry-run", "--seed", "11", "--strategy", "half5050,sporadic50",
                        "--out", tmp_path / "res"], capsys)
    assert code == 0
    resolved = json.loads(out)
    assert [r["strategy"] for r in resolved] == ["Half5050", "Sporadic50"]
    assert all(r["seed"] == 11 and r["preprocessing"] == "raw1d" for r in resolved)
    assert not (tmp_path / "res").exists()


def test_run_invalid_spec_lists_paths(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json", repeats=0, model="lstm")
    code, _, err = run(["run", spec], capsys)
    assert code == 2
    assert "$.repeats" in err and "$.model" in err
    (tmp_path / "broken.json").write_text("{")
    assert run(["run", tmp_path / "broken.json"], capsys)[0] == 2
    assert run(["run", tmp_path / "missing.json"], capsys)[0] == 2


def test_run_sweep_csv_and_svg(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    code, _, _ = run(["run", spec, "--strategy", "half5050,aba", "--format", "csv,svg", "--render", "1",
                      "--out", tmp_path / "res"], capsys)
    assert code == 0
    rows = (tmp_path / "res" / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2
    assert "accuracy_mean" in rows[0] and "accuracy_std" in rows[0]
    assert len(list((tmp_path / "res").glob("*.svg"))) == 2


def test_flops_table(capsys):
    code, out, _ = run(["flops"], capsys)
    assert code == 0
    rows = [line for line in out.splitlines() if re.match(r"^\w+ \| \d+×\d+ \| ", line)]
    assert len(rows) == 9
    cnn = next(r for r in rows if r.startswith("CNN |"))
    assert cnn.startswith("CNN | 2048×1 |")
    total = float(cnn.split("|")[2].split()[0]) * 1e6
    assert 144e6 <= total <= 576e6


def test_flops_json_and_scale(capsys):
    full = json.loads(run(["flops", "--json"], capsys)[1])
    half = json.loads(run(["flops", "--json", "--scale", "0.5"], capsys)[1])
    assert "MAC" in full["convention"]
    for a, b in zip(full["models"], half["models"]):
        assert b["total_flops"] < a["total_flops"]


def test_gradcheck_single_kind(capsys):
    code, out, _ = run(["gradcheck", "--kind", "cnn"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 1 and "< 1e-4" in lines[0]


def test_gradcheck_injected_error(capsys):
    code, out, _ = run(["gradcheck", "--kind", "cnn", "--inject-grad-error"], capsys)
    assert code == 2 and "FAIL" in out


def test_report_merges(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    run(["run", spec, "--out", tmp_path / "a"], capsys)
    run(["run", spec, "--strategy", "sporadic50", "--out", tmp_path / "b"], capsys)
    code, out, _ = run(["report", tmp_path / "a" / "report.json", tmp_path / "b" / "report.json",
                        "--format", "csv,json", "--out", tmp_path / "m"], capsys)
    assert code == 0
    assert len(out.strip().splitlines()) == 3
    assert (tmp_path / "m" / "merged.csv").read_text() == out
    assert (tmp_path / "m" / "merged.json").exists()


def test_global_flags_after_subcommand():
    args = build_parser().parse_args(["flops", "--seed", "4", "--jobs", "2", "-vv"])
    assert (args.seed, args.jobs, args.verbose) == (4, 2, 2)
    args = build_parser().parse_args(["--seed", "5", "flops"])
    assert args.seed == 5


def test_run_sweep_siamese_ignores_strategy(tmp_path, capsys):
    spec = minimal_spec(tmp_path / "spec.json")
    code, out, _ = run(["run", spec, "--dry-run", "--model", "cnn,siamesefeatcnntran",
                        "--strategy", "half5050,aba"], capsys)
    assert code == 0
    resolved = json.loads(out)
    assert [(r["model"], r["strategy"]) for r in resolved] == [
        ("CNN", "Half5050"), ("CNN", "ABA502525"), ("SiameseFeatCNNTran", None)]
