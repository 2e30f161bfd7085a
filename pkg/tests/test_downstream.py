import numpy as np
import pytest

from src.nn import images_to_tensor, save_checkpoint, select_prefix
from src.services.dataset import SplitSpec, make_split
from src.services.downstream import (
    AgreementReport,
    DownstreamService,
    LabelTable,
    _train_stage_classifier,
    agreement,
    build_stage_classifier,
    eval_stage,
    finetune,
    labelled_samples,
    predict_stages,
    train_baseline,
)
from src.services.pretext import build_pretext_model
from src.services.training import TrainingConfig
from src.utils.config import ConfigManager
from src.utils.errors import DatasetError, LabelError
from src.utils.file_utils import FileUtils


def day_labels(series_list, source="truth"):
    """阶段 = 天数 // 2，截断到 3"""
    rows = [
        (image.wound_id, image.day, min(3, image.day // 2))
        for series in series_list
        for image in series.images
    ]
    return LabelTable.from_rows(rows, source)


def test_label_table_validation():
    with pytest.raises(LabelError):
        LabelTable.from_rows([("a", 0, 1), ("a", 0, 2)])
    with pytest.raises(LabelError):
        LabelTable.from_rows([("a", 0, 4)])
    with pytest.raises(LabelError):
        LabelTable({("a", 0): 1}, source="oracle")


def test_missing_label_names_wound_and_day(series_factory):
    series = series_factory(1, 3)
    labels = day_labels(series)
    del labels.stages[("young_00", 1)]
    with pytest.raises(LabelError) as excinfo:
        labelled_samples(series, labels, ["young_00"])
    assert "young_00" in str(excinfo.value)
    assert "1" in str(excinfo.value)


def test_encoder_weights_transfer_bit_identically(tiny_encoder_config, series_factory):
    pretext = build_pretext_model(tiny_encoder_config, seed=3).eval()
    classifier = build_stage_classifier(
        select_prefix(pretext.state_dict(), "encoder."), tiny_encoder_config, seed=9
    ).eval()
    pixels = np.stack([i.pixels for i in series_factory(1, 3)[0].images])
    x = images_to_tensor(pixels)
    np.testing.assert_array_equal(classifier.embed(x).data, pretext.embed(x).data)


def test_baseline_has_same_architecture(tiny_encoder_config):
    pretext = build_pretext_model(tiny_encoder_config, seed=3)
    tuned = build_stage_classifier(
        select_prefix(pretext.state_dict(), "encoder."), tiny_encoder_config, seed=0
    )
    scratch = build_stage_classifier(None, tiny_encoder_config, seed=0)
    assert list(tuned.parameters()) == list(scratch.parameters())
    assert tuned.parameter_count() == scratch.parameter_count()
    assert tuned.parameter_count() == pretext.encoder.parameter_count() + 68


def test_eval_constant_classifier(tiny_encoder_config, series_factory):
    series = series_factory(1, 8)
    labels = day_labels(series)
    model = build_stage_classifier(None, tiny_encoder_config, seed=0, dropout=0.0)
    fc = model.head.fc
    fc.weight.data[...] = 0.0
    fc.bias.data[...] = [0.0, 0.0, 50.0, 0.0]
    samples = labelled_samples(series, labels, [s.wound_id for s in series])
    evaluation = eval_stage(model, samples)
    assert evaluation.count == 16
    assert evaluation.accuracy == pytest.approx(0.25)
    assert evaluation.confusion[:, 2].tolist() == [4, 4, 4, 4]
    assert evaluation.confusion.sum() == 16
    with pytest.raises(DatasetError):
        eval_stage(model, [])


def test_overfits_small_labelled_set(tiny_encoder_config, series_factory, quiet_logger):
    series = series_factory(1, 4)
    labels = day_labels(series)
    samples = labelled_samples(series, labels, [s.wound_id for s in series])
    model = build_stage_classifier(None, tiny_encoder_config, seed=0, dropout=0.0)
    config = TrainingConfig(
        batch_size=8, epochs=200, learning_rate=0.005, dropout=0.0, augment=False
    )
    history = _train_stage_classifier(
        model, samples, [], config, 1, "overfit", quiet_logger
    )
    assert history.records[-1].train_loss < 0.5 * history.records[0].train_loss
    assert eval_stage(model, samples).accuracy >= 0.75


def test_frozen_encoder_is_not_updated(tiny_encoder_config, series_factory, quiet_logger):
    series = series_factory(1, 4)
    samples = labelled_samples(series, day_labels(series), [s.wound_id for s in series])
    model = build_stage_classifier(None, tiny_encoder_config, seed=0)
    before = model.state_dict()
    config = TrainingConfig(batch_size=4, epochs=2, freeze_encoder=True)
    _train_stage_classifier(model, samples, [], config, 2, "frozen", quiet_logger)
    after = model.state_dict()
    for name in before:
        if name.startswith("encoder."):
            np.testing.assert_array_equal(before[name], after[name])
    assert any(
        not np.array_equal(before[n], after[n]) for n in before if n.startswith("head.")
    )


def test_finetune_and_baseline_run_end_to_end(
    tmp_path, tiny_encoder_config, series_factory, quiet_logger
):
    series = series_factory(3, 4)
    split = make_split(series, 1, 1, seed=0)
    labels = day_labels(series, "pseudo")
    pretext = build_pretext_model(tiny_encoder_config, seed=1)
    path = tmp_path / "pretext.ckpt"
    save_checkpoint(path, pretext.state_dict())
    config = TrainingConfig(batch_size=4, epochs=2, seed=0)

    model, history = finetune(
        path, labels, split, series, config, tiny_encoder_config, quiet_logger
    )
    assert len(history) == 2
    assert history.best_epoch in (1, 2)
    baseline, _ = train_baseline(
        labels, split, series, config, tiny_encoder_config, quiet_logger
    )
    assert baseline.parameter_count() == model.parameter_count()


def test_finetune_requires_labels_for_every_split(
    tiny_encoder_config, series_factory, quiet_logger
):
    series = series_factory(3, 2)
    split = make_split(series, 1, 1, seed=0)
    labels = day_labels(series)
    test_wound = split.test[0]
    labels = LabelTable(
        {k: v for k, v in labels.stages.items() if k[0] != test_wound}, "pseudo"
    )
    pretext = build_pretext_model(tiny_encoder_config)
    with pytest.raises(LabelError):
        finetune(
            pretext.state_dict(),
            labels,
            split,
            series,
            TrainingConfig(epochs=1),
            tiny_encoder_config,
            quiet_logger,
        )


def test_agreement_per_split_and_overall():
    split = SplitSpec(("a",), ("b",), ("c",))
    human = LabelTable.from_rows(
        [("a", 0, 0), ("a", 1, 1), ("a", 2, 2), ("a", 3, 3), ("b", 0, 0), ("c", 0, 1)],
        "human",
    )
    pseudo = LabelTable.from_rows(
        [("a", 0, 0), ("a", 1, 1), ("a", 2, 2), ("a", 3, 0), ("b", 0, 0), ("c", 0, 2)]
    )
    report = agreement(human, pseudo, split)
    assert report.fraction("train") == pytest.approx(0.75)
    assert report.fraction("val") == 1.0
    assert report.fraction("test") == 0.0
    weighted = sum(report.fraction(p) * report.counts[p] for p in report.counts)
    assert report.fraction("overall") == pytest.approx(weighted / 6)
    assert report.rows()[-1] == ("overall", 4, 6, pytest.approx(4 / 6))


def test_agreement_rejects_different_key_sets():
    split = SplitSpec(("a",), ("b",), ("c",))
    one = LabelTable.from_rows([("a", 0, 0), ("a", 1, 1)])
    other = LabelTable.from_rows([("a", 0, 0), ("a", 2, 1)])
    with pytest.raises(LabelError) as excinfo:
        agreement(one, other, split)
    assert "('a', 1)" in str(excinfo.value)
    assert "('a', 2)" in str(excinfo.value)


def test_empty_split_fraction_is_nan():
    report = AgreementReport({"train": 1, "val": 0}, {"train": 2, "val": 0})
    assert np.isnan(report.fraction("val"))
    assert report.fraction("overall") == 0.5


def test_predictions_are_distributions(tiny_encoder_config, series_factory):
    series = series_factory(1, 3)
    model = build_stage_classifier(None, tiny_encoder_config, seed=0)
    predictions = predict_stages(model, series)
    assert [key for key, _, _ in predictions] == [
        image.key for s in series for image in s.images
    ]
    for _, stage, probs in predictions:
        assert probs.sum() == pytest.approx(1.0)
        assert stage == int(np.argmax(probs))


def test_service_label_and_metric_files(
    tmp_path, tiny_encoder_config, series_factory, quiet_logger
):
    series = series_factory(3, 2)
    split = make_split(series, 1, 1, seed=0)
    labels = day_labels(series)
    config = ConfigManager(None)
    service = DownstreamService(config, quiet_logger, FileUtils())

    FileUtils.write_table(
        tmp_path / "human.txt",
        ("wound_id", "day", "stage", "annotator"),
        [(w, d, s, "x") for w, d, s in labels.rows()],
    )
    human = service.read_labels(tmp_path / "human.txt", "human")
    assert human.stages == labels.stages
    assert human.source == "human"

    FileUtils.write_table(tmp_path / "bad.txt", ("wound_id", "day"), [("a", 0)])
    with pytest.raises(LabelError):
        service.read_labels(tmp_path / "bad.txt", "human")

    model = build_stage_classifier(None, tiny_encoder_config, seed=0)
    evaluations = service.evaluate(model, labels, split, series)
    assert set(evaluations) == {"train", "val", "test"}
    service.write_metrics(tmp_path, evaluations, "human_")
    _, metric_rows = FileUtils.read_table(tmp_path / "human_metrics.txt")
    assert [row[0] for row in metric_rows] == ["train", "val", "test"]
    _, confusion_rows = FileUtils.read_table(tmp_path / "human_confusion.txt")
    assert len(confusion_rows) == 12

    service.write_labels(tmp_path / "labels.txt", labels)
    assert service.read_labels(tmp_path / "labels.txt", "pseudo").stages == labels.stages
