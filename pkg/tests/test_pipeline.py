import pytest

from app.checkpoints import Stage2Bundle, fresh_stage1
from app.errors import UsageError
from app.features.model import DescriptorModel
from app.matching.metrics import read_report
from app.matching.pipeline import MATCH_DIR, OVERLAY_DIR, evaluate_dumps, load_dumps, match_pair, match_tiles
from app.matching.visualize import plot_rmse_histogram, plot_sr_bar


@pytest.fixture
def bundle(tiny_cfg):
    stage1 = fresh_stage1(tiny_cfg)
    model = DescriptorModel(tiny_cfg, stage1.net.tap_channels)
    return Stage2Bundle(model=model, stage1=stage1, cfg=tiny_cfg)


def test_self_match_is_exact(bundle, tiny_cfg, pair128):
    outcome = match_pair(bundle, pair128, tiny_cfg, self_match=True)
    assert len(outcome.matches) >= 10
    assert outcome.metrics.success
    assert outcome.metrics.rmse < 0.5


def test_match_tiles_writes_dumps_overlays_and_report(bundle, tiny_cfg, tiny_pairs, tmp_path):
    run = match_tiles(bundle, tiny_pairs, tiny_cfg, out_dir=tmp_path, method="untrained")
    assert [o.tile_id for o in run.outcomes] == sorted(p.tile_id for p in tiny_pairs)
    assert run.report.n_pairs == len(tiny_pairs)
    assert run.report.method == "untrained"
    assert read_report(tmp_path).n_pairs == len(tiny_pairs)
    for pair in tiny_pairs:
        assert (tmp_path / MATCH_DIR / f"{pair.tile_id}.json").is_file()
        assert (tmp_path / OVERLAY_DIR / f"{pair.tile_id}.png").is_file()

    recomputed = evaluate_dumps(load_dumps(tmp_path), tiny_cfg, method="untrained")
    assert [m.model_dump() for m in recomputed.per_pair] == [m.model_dump() for m in run.report.per_pair]


def test_parallel_matching_gives_the_same_report(bundle, tiny_cfg, tiny_pairs):
    serial = match_tiles(bundle, tiny_pairs, tiny_cfg, visualize=False)
    parallel = match_tiles(bundle, list(reversed(tiny_pairs)), tiny_cfg, workers=2, visualize=False)
    assert [m.model_dump() for m in serial.report.per_pair] == [m.model_dump() for m in parallel.report.per_pair]


def test_empty_inputs_rejected(bundle, tiny_cfg, tmp_path):
    with pytest.raises(UsageError):
        match_tiles(bundle, [], tiny_cfg)
    with pytest.raises(UsageError):
        load_dumps(tmp_path)


def test_report_plots(bundle, tiny_cfg, tiny_pairs, tmp_path):
    report = match_tiles(bundle, tiny_pairs, tiny_cfg, visualize=False).report
    assert plot_rmse_histogram([report], tmp_path / "hist.png").is_file()
    assert plot_sr_bar([report, report], tmp_path / "bar.png").is_file()
