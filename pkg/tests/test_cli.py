import json
from pathlib import Path

import pandas as pd
import pytest
from sqlalchemy import select

from app.db_depends import get_db
from app.main import main
from app.matching.metrics import read_report
from app.models import PairResult, Run

TINY_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "tiny.toml"


@pytest.fixture
def config_file(tmp_path):
    # 64-px тайлы дают мало углов: снижаем порог числа соответствий
    text = TINY_CONFIG.read_text(encoding="utf-8").replace("min_correspondences = 8", "min_correspondences = 4")
    path = tmp_path / "cli.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


def _synth(config, out, seed="1"):
    return main(["synth", "--config", config, "--out", str(out), "--n-pairs", "4", "--seed", seed])


def test_synth_is_reproducible(config_file, tmp_path, capsys):
    assert _synth(config_file, tmp_path / "a") == 0
    first = capsys.readouterr().out.strip().splitlines()[-1]
    assert _synth(config_file, tmp_path / "b") == 0
    second = capsys.readouterr().out.strip().splitlines()[-1]
    assert first == second and len(first) == 64
    assert (tmp_path / "a" / "run_config.json").is_file()


def test_synth_without_pairs_is_usage_error(config_file, tmp_path):
    assert main(["synth", "--config", config_file, "--out", str(tmp_path), "--n-pairs", "0"]) == 2


def test_unknown_verb_and_bad_flag():
    assert main(["dance"]) == 2
    assert main(["synth", "--n-pairs", "many"]) == 2


def test_descriptors_need_a_diffusion_checkpoint(config_file, tmp_path):
    _synth(config_file, tmp_path / "data")
    code = main(["train-descriptors", "--config", config_file, "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "s2")])
    assert code == 3


def test_match_with_missing_checkpoint(config_file, tmp_path):
    code = main(["match", "--config", config_file, "--ckpt", str(tmp_path / "gone.pt"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "m")])
    assert code == 3
    assert not (tmp_path / "m" / "report.json").exists()


def test_rejected_synth_leaves_no_run(config_file, tmp_path):
    main(["synth", "--config", config_file, "--out", str(tmp_path / "x"), "--n-pairs", "0"])
    main(["synth", "--config", config_file, "--out", str(tmp_path / "y"), "--n-pairs", "1"])
    with get_db() as db:
        runs = db.scalars(select(Run).where(Run.command == "synth")).all()
    assert [(r.status, r.exit_code) for r in runs] == [("ok", 0)]


def test_full_command_flow(config_file, tmp_path):
    data, s1, s2, m = (tmp_path / name for name in ("data", "s1", "s2", "m"))
    assert _synth(config_file, data) == 0
    assert main(["train-diffusion", "--config", config_file, "--data", str(data), "--out", str(s1)]) == 0
    assert (s1 / "diffusion.pt").is_file() and len(pd.read_csv(s1 / "diffusion_log.csv")) == 1

    assert main(["train-descriptors", "--config", config_file, "--data", str(data),
                 "--stage1", str(s1 / "diffusion.pt"), "--out", str(s2)]) == 0
    assert (s2 / "descriptors.pt").is_file()

    assert main(["match", "--ckpt", str(s2 / "descriptors.pt"), "--data", str(data), "--out", str(m)]) == 0
    report = read_report(m)
    assert report.n_pairs == 4
    assert len(list((m / "matches").glob("*.json"))) == 4
    with get_db() as db:
        assert len(db.scalars(select(PairResult)).all()) == 4

    # τ относится к инференсу, размер дескриптора нет
    assert main(["match", "--ckpt", str(s2 / "descriptors.pt"), "--data", str(data), "--out", str(tmp_path / "m2"),
                 "--tau", "0.2", "--no-viz"]) == 0
    resized = tmp_path / "resized.json"
    resized.write_text(json.dumps({"descriptor": {"dim": 16}}), encoding="utf-8")
    assert main(["match", "--ckpt", str(s2 / "descriptors.pt"), "--config", str(resized), "--data", str(data),
                 "--out", str(tmp_path / "m3")]) == 2

    assert main(["evaluate", "--dumps", str(m), "--eps-px", "5"]) == 0
    relaxed = read_report(m / "eval_eps5")
    assert relaxed.eps_px == 5.0 and relaxed.n_pairs == 4
    assert relaxed.sr_percent >= read_report(m).sr_percent

    out = tmp_path / "report"
    assert main(["report", str(m), str(m / "eval_eps5"), "--out", str(out)]) == 0
    table = pd.read_csv(out / "comparison.csv", keep_default_na=False)
    assert list(table.columns[:4]) == ["method", "SR", "NCM", "RMSE"]
    assert len(table) == 2 and table["warning"].str.contains("eps_px differs").all()
    assert (out / "rmse_hist.png").is_file() and (out / "sr_bar.png").is_file()

    # baseline обходится без чекпоинта диффузии; абляцию чекпоинта нельзя сменить при match
    base_s2, base_m = tmp_path / "s2_base", tmp_path / "m_base"
    assert main(["train-descriptors", "--config", config_file, "--data", str(data), "--ablation", "baseline",
                 "--out", str(base_s2)]) == 0
    assert main(["match", "--ckpt", str(base_s2 / "descriptors.pt"), "--data", str(data), "--out", str(base_m),
                 "--no-viz"]) == 0
    assert main(["match", "--ckpt", str(base_s2 / "descriptors.pt"), "--data", str(data),
                 "--out", str(tmp_path / "m4"), "--ablation", "full"]) == 2

    cmp = tmp_path / "cmp"
    assert main(["evaluate", "--dumps", str(base_m), "--dumps", str(m), "--out", str(cmp)]) == 0
    table = pd.read_csv(cmp / "comparison.csv", keep_default_na=False)
    assert list(table["method"]) == ["full", "baseline"]
    assert read_report(cmp / "01_full").n_pairs == 4
    assert main(["evaluate", "--dumps", str(base_m), "--dumps", str(m)]) == 2


def test_report_needs_input(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2
