import pytest

import main
from src.app import ARTIFACTS, StagePipeline
from src.utils.errors import MissingArtifactError
from src.utils.file_utils import FileUtils

SMALL = [
    "synth.wounds_per_cohort=3",
    "synth.days=4",
    "synth.image_side=16",
    "data.image_size=16",
    "encoder.stem_channels=4",
    "encoder.layers_per_block=2",
    "encoder.growth_rate=4",
    "pretext.epochs=1",
    "pretext.batch_size=8",
    "pretext.workers=0",
    "cluster.n_init=2",
    "cluster.workers=1",
    "downstream.epochs=1",
    "downstream.workers=0",
    "logging.level=ERROR",
    "logging.enable_color=false",
    "logging.show_progress=false",
    "logging.log_file=null",
]


def pipeline(out_dir, seed=0, extra=()):
    return StagePipeline(None, str(out_dir), seed, SMALL + list(extra))


def cli_args():
    args = ["--out", "out"]
    for item in SMALL:
        args += ["--set", item]
    return args


def summary(out_dir, command):
    return FileUtils.read_json_file(out_dir / f"{command}.summary.json")


def test_every_artifact_names_a_known_command(tmp_path):
    app = pipeline(tmp_path)
    assert set(ARTIFACTS.values()) <= set(app.phases)


def test_missing_upstream_artifact_names_the_command(tmp_path):
    app = pipeline(tmp_path)
    assert not app.run("cluster")
    assert isinstance(app.last_error, MissingArtifactError)
    assert app.last_error.command == "embed"
    record = summary(tmp_path, "cluster")
    assert record["success"] is False
    assert "embed" in record["errors"][0]


def test_unknown_command(tmp_path):
    with pytest.raises(ValueError):
        pipeline(tmp_path).run("train")


def test_synth_and_pairs_summaries(tmp_path):
    app = pipeline(tmp_path, seed=4)
    assert app.run("synth")
    assert (tmp_path / "dataset" / "manifest.json").exists()
    assert app.run("pairs")

    record = summary(tmp_path, "pairs")
    assert record["success"] is True
    assert record["seed"] == 4
    assert record["config"]["synth"]["days"] == 4
    assert record["metrics"]["pairs"] == 6 * 12
    assert record["metrics"]["train_pairs"] == 4 * 12
    assert record["metrics"]["val_images"] == 2 * 4
    assert record["wall_time_seconds"] >= 0


def test_embeddings_are_reproducible(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        app = pipeline(out, seed=2)
        for command in ("synth", "pairs", "train-pretext", "embed"):
            assert app.run(command), command
        outputs.append((out / "embeddings.txt").read_bytes())
    assert outputs[0] == outputs[1]

    _, rows = FileUtils.read_table(tmp_path / "a" / "embeddings.txt")
    assert len(rows) == 6 * 4
    assert len(rows[0]) == 2 + 16


def test_report_collects_existing_tables(tmp_path):
    app = pipeline(tmp_path)
    assert not app.run("report")
    for command in ("synth", "pairs", "train-pretext", "report"):
        assert app.run(command), command
    index = FileUtils.read_json_file(tmp_path / "report" / "index.json")
    assert index["files"] == ["pretext_history.txt", "pretext_metrics.txt"]


def test_agreement_requires_human_labels(tmp_path):
    missing = tmp_path / "none.txt"
    app = pipeline(tmp_path, extra=[f"downstream.human_labels={missing}"])
    for name in ("pseudo_labels.txt", "split.txt"):
        (tmp_path / name).write_text("", encoding="utf-8")
    assert not app.run("agreement")
    assert app.last_error.artifact == "human_labels.txt"
    assert app.last_error.command == "synth"


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    args = cli_args()

    assert main.main(["cluster"] + args) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("ERROR MissingArtifactError:")
    assert "embed" in err[-1]

    assert main.main(["synth"] + args) == 0
    assert (tmp_path / "out" / "dataset" / "manifest.json").exists()

    assert main.main(["pairs"] + args + ["--set", "pretext.epochs=0"]) == 1
    assert "ERROR ConfigError:" in capsys.readouterr().err


def test_main_noise_flag(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = cli_args()
    assert main.main(["synth", "--noise", "0.0"] + args) == 0
    record = summary(tmp_path / "out", "synth")
    assert record["config"]["synth"]["noise"] == 0.0


@pytest.mark.slow
def test_run_all_is_deterministic(tmp_path):
    extra = [
        "synth.wounds_per_cohort=4",
        "synth.days=8",
        "pretext.epochs=2",
        "downstream.epochs=2",
    ]
    produced = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert pipeline(out, seed=1, extra=extra).run("run-all")
        produced.append(
            {
                file: (out / file).read_bytes()
                for file in ("pseudo_labels.txt", "metrics.txt", "agreement.txt")
            }
        )
        assert (out / "report" / "index.json").exists()
    assert produced[0] == produced[1]
