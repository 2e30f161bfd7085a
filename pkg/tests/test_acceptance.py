"""默认配置下合成数据集上的端到端指标，耗时较长，只在 --runslow 时运行"""

import statistics

import pytest

from src.app import StagePipeline
from src.utils.file_utils import FileUtils

QUIET = [
    "logging.level=ERROR",
    "logging.enable_color=false",
    "logging.show_progress=false",
    "logging.log_file=null",
]

STEPS = ("pairs", "train-pretext", "embed", "cluster", "pseudo-label", "finetune", "evaluate")


def metrics(out_dir, command):
    return FileUtils.read_json_file(out_dir / f"{command}.summary.json")["metrics"]


def run_steps(out_dir, seed, commands, extra=()):
    app = StagePipeline(None, str(out_dir), seed, QUIET + list(extra))
    for command in commands:
        assert app.run(command), f"{command}: {app.last_error}"


@pytest.mark.slow
def test_default_pipeline_reaches_target_accuracies(tmp_path):
    run_steps(tmp_path, 0, ("synth",) + STEPS)

    assert metrics(tmp_path, "train-pretext")["test_accuracy"] >= 0.90
    assert metrics(tmp_path, "cluster")["cluster_purity"] >= 0.8
    assert metrics(tmp_path, "evaluate")["test_accuracy"] >= 0.85


@pytest.mark.slow
def test_finetuned_median_is_not_below_baseline_median(tmp_path):
    shared = tmp_path / "shared"
    run_steps(shared, 0, ("synth",))
    root = f"data.root={shared / 'dataset'}"

    finetuned, baseline = [], []
    for seed in range(5):
        out = tmp_path / f"seed_{seed}"
        run_steps(out, seed, STEPS + ("baseline",), extra=[root])
        finetuned.append(metrics(out, "evaluate")["human_test_accuracy"])
        baseline.append(metrics(out, "baseline")["test_accuracy"])
    assert statistics.median(finetuned) >= statistics.median(baseline)
