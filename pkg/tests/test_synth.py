import numpy as np
import pytest

from src.services.dataset import load_dataset
from src.services.synth import (
    SynthConfig,
    SynthService,
    base_transitions,
    generate,
    healing_progress,
    human_proxy_labels,
    read_ground_truth,
    render_wound,
    stage_of,
    transition_days,
    wound_ids,
)
from src.utils.config import ConfigManager
from src.utils.errors import ConfigError
from src.utils.file_utils import FileUtils


def written_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def small_config(**changes):
    values = dict(wounds_per_cohort=2, days=6, image_side=16, workers=1, seed=0)
    values.update(changes)
    return SynthConfig(**values)


@pytest.mark.parametrize("days,rate", [(4, 1.0), (16, 1.0), (16, 0.7), (30, 0.4)])
def test_transitions_are_ordered_and_leave_room_for_every_stage(days, rate):
    for seed in range(50):
        t1, t2, t3 = transition_days(days, rate, np.random.default_rng(seed))
        assert 1 <= t1 < t2 < t3 <= days - 1
        stages = [stage_of(day, (t1, t2, t3)) for day in range(days)]
        assert stages[0] == 0
        assert stages == sorted(stages)
        assert set(stages) == {0, 1, 2, 3}


def test_aged_transitions_are_stretched():
    young = base_transitions(16, 1.0)
    aged = base_transitions(16, 0.7)
    np.testing.assert_allclose(aged, young / 0.7)
    np.testing.assert_allclose(young, [2.0, 5.0, 10.0])


def test_progress_is_monotone_and_matches_stage():
    transitions = (3, 6, 10)
    progress = [healing_progress(day, transitions, 16) for day in range(16)]
    assert progress[0] == 0.0
    assert all(b > a for a, b in zip(progress, progress[1:]))
    for day, value in enumerate(progress):
        stage = stage_of(day, transitions)
        assert stage / 4 <= value < (stage + 1) / 4


@pytest.mark.parametrize("stage", range(4))
def test_render_shape_and_range(stage):
    skin = np.array([0.8, 0.62, 0.55])
    pixels = render_wound(32, stage, 10.0, skin, 0.05, np.random.default_rng(0))
    assert pixels.shape == (32, 32, 3)
    assert 0.0 <= pixels.min() and pixels.max() <= 1.0


def test_wound_ids_are_grouped_by_cohort():
    ids = wound_ids(small_config())
    assert ids == [
        ("young_00", "young"),
        ("young_01", "young"),
        ("aged_00", "aged"),
        ("aged_01", "aged"),
    ]


@pytest.mark.parametrize(
    "changes",
    [{"days": 3}, {"image_side": 4}, {"aged_rate": 0.0}, {"noise": -0.1}, {"label_noise": 2}],
)
def test_config_validation(changes, tmp_path, quiet_logger):
    with pytest.raises(ConfigError):
        generate(small_config(**changes), tmp_path, quiet_logger)


def test_generation_is_byte_identical(tmp_path, quiet_logger):
    generate(small_config(workers=1), tmp_path / "a", quiet_logger)
    generate(small_config(workers=3), tmp_path / "b", quiet_logger)
    files_a = written_files(tmp_path / "a")
    files_b = written_files(tmp_path / "b")
    assert files_a == files_b
    assert len(files_a) == 4 * 6 + 3
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_different_seeds_give_different_images(tmp_path, quiet_logger):
    generate(small_config(seed=0), tmp_path / "a", quiet_logger)
    generate(small_config(seed=1), tmp_path / "b", quiet_logger)
    rel = "images/young_00/day_02.png"
    assert (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()


def test_generated_dataset_loads_and_matches_truth(tmp_path, quiet_logger):
    truth = generate(small_config(), tmp_path, quiet_logger)
    series = load_dataset(tmp_path, image_size=16, logger=quiet_logger)
    assert len(series) == 4
    assert all(s.days == list(range(6)) for s in series)

    loaded = read_ground_truth(tmp_path / "ground_truth.txt")
    assert loaded.stages == truth.stages
    assert loaded.transitions == truth.transitions
    _, rows = FileUtils.read_table(tmp_path / "human_labels.txt")
    assert len(rows) == 24


def test_human_proxy_label_noise_extremes(quiet_logger, tmp_path):
    truth = generate(small_config(), tmp_path, quiet_logger)
    clean = human_proxy_labels(truth, 0.0, seed=0)
    assert {(w, d): s for w, d, s in clean} == truth.stages
    noisy = human_proxy_labels(truth, 1.0, seed=0)
    assert all(s != truth.stages[(w, d)] for w, d, s in noisy)
    assert all(0 <= s <= 3 for _, _, s in noisy)
    assert noisy == human_proxy_labels(truth, 1.0, seed=0)


def test_radius_tracks_stage(tmp_path, quiet_logger):
    config = small_config(wounds_per_cohort=4, days=16, image_side=32)
    truth = generate(config, tmp_path, quiet_logger)
    hits = 0
    for (wound_id, day), stage in truth.stages.items():
        ratio = truth.radii[(wound_id, day)] / truth.radii[(wound_id, 0)]
        progress = (1.0 - ratio) / 0.85
        predicted = min(3, int(np.floor(4 * progress + 1e-9)))
        hits += predicted == stage
    assert hits / len(truth.stages) > 0.95


def test_stages_are_visually_separable_without_noise(tmp_path, quiet_logger):
    config = small_config(wounds_per_cohort=4, days=16, image_side=32, noise=0.0)
    truth = generate(config, tmp_path, quiet_logger)
    series = load_dataset(tmp_path, image_size=32, logger=quiet_logger)

    def features(pixels):
        return np.concatenate([pixels.mean(axis=(0, 1)), pixels.std(axis=(0, 1))])

    train = [s for s in series if s.wound_id.endswith(("00", "01"))]
    test = [s for s in series if not s.wound_id.endswith(("00", "01"))]
    centroids = []
    for stage in range(4):
        rows = [
            features(image.pixels)
            for s in train
            for image in s.images
            if truth.stages[image.key] == stage
        ]
        centroids.append(np.mean(rows, axis=0))
    centroids = np.array(centroids)
    hits = total = 0
    for s in test:
        for image in s.images:
            distances = np.linalg.norm(centroids - features(image.pixels), axis=1)
            hits += int(np.argmin(distances)) == truth.stages[image.key]
            total += 1
    assert hits / total > 0.6


def test_service_uses_configured_seed(tmp_path, quiet_logger):
    config = ConfigManager(None)
    config.apply_overrides(
        ["synth.wounds_per_cohort=1", "synth.days=4", "synth.image_side=8", "seed=7"]
    )
    result = SynthService(config, quiet_logger, FileUtils()).generate(tmp_path)
    assert result.success
    assert len(result.truth.stages) == 8
    assert (tmp_path / "manifest.json").exists()
