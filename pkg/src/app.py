"""
应用主逻辑类
协调各个服务，按子命令执行合成-配对-预训练-嵌入-聚类-伪标签-微调-评估的流程
实现统一的错误处理、上游产物检查和运行摘要
"""

import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .services.dataset import SPLIT_PARTS, DatasetService, WoundSeries
from .services.downstream import DownstreamService, LabelTable, agreement, predict_stages
from .services.pretext import PretextService, embed_all, save_pretext
from .services.stagedisc import StageDiscoveryService, cluster_purity
from .services.synth import SynthService, read_ground_truth
from .utils.config import ConfigManager
from .utils.errors import HealStageError, MissingArtifactError
from .utils.file_utils import FileUtils
from .utils.logger import Logger, LogLevel

# 产物文件名 -> 生成它的子命令
ARTIFACTS: Dict[str, str] = {
    "manifest.json": "synth",
    "split.txt": "pairs",
    "pairs.txt": "pairs",
    "pretext.ckpt": "train-pretext",
    "pretext_history.txt": "train-pretext",
    "embeddings.txt": "embed",
    "centroids.txt": "cluster",
    "pseudo_labels.txt": "pseudo-label",
    "stage.ckpt": "finetune",
}

RUN_ALL = (
    "synth",
    "pairs",
    "train-pretext",
    "embed",
    "cluster",
    "pseudo-label",
    "finetune",
    "evaluate",
    "agreement",
    "report",
)

REPORT_FILES = (
    "pretext_history.txt",
    "pretext_metrics.txt",
    "projection.txt",
    "cluster_stats.txt",
    "stage_map.txt",
    "finetune_history.txt",
    "baseline_history.txt",
    "metrics.txt",
    "confusion.txt",
    "human_metrics.txt",
    "human_confusion.txt",
    "baseline_metrics.txt",
    "baseline_confusion.txt",
    "agreement.txt",
)


class ExecutionSummary:
    """执行摘要类，写入 <command>.summary.json"""

    def __init__(self, command: str):
        self.command = command
        self.seed = 0
        self.config: Dict[str, Any] = {}
        self.wall_time = 0.0
        self.metrics: Dict[str, Any] = {}
        self.artifacts: List[str] = []
        self.errors: List[str] = []
        self.warnings: List[str] = []
        self.error_class: Optional[str] = None

    def add_error(self, error: str) -> None:
        """添加错误信息"""
        self.errors.append(error)

    def add_warning(self, warning: str) -> None:
        """添加警告信息"""
        self.warnings.append(warning)

    def add_metric(self, name: str, value: Any) -> None:
        self.metrics[name] = value

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "success": not self.errors,
            "seed": self.seed,
            "config": self.config,
            "wall_time_seconds": self.wall_time,
            "metrics": self.metrics,
            "artifacts": self.artifacts,
            "errors": self.errors,
            "warnings": self.warnings,
        }


class StagePipeline:
    """愈合阶段流水线主应用类"""

    def __init__(
        self,
        config_path: Optional[str] = "config.json",
        out_dir: Optional[str] = None,
        seed: Optional[int] = None,
        overrides: Sequence[str] = (),
    ):
        """
        初始化流水线

        Args:
            config_path: 配置文件路径；为 None 时只使用默认值
            out_dir: 输出目录，覆盖 output.dir
            seed: 随机种子，覆盖 seed
            overrides: 形如 "section.key=value" 的覆盖项

        Raises:
            ConfigError: 配置文件或覆盖项无效
        """
        self.config_path = config_path

        # 命令行优先于配置文件，配置文件优先于默认值
        self.config_manager = ConfigManager(config_path)
        self.config_manager.load_config()
        self.config_manager.apply_overrides(list(overrides))
        if out_dir is not None:
            self.config_manager.set_value("output.dir", out_dir)
        if seed is not None:
            self.config_manager.set_value("seed", seed)

        logging_config = self.config_manager.get_logging_config()
        self.logger = Logger(
            enable_color=logging_config["enable_color"],
            log_level=LogLevel.from_string(logging_config["level"]),
            show_progress=logging_config["show_progress"],
        )
        self.file_utils = FileUtils()

        self.dataset_service = DatasetService(self.config_manager, self.logger, self.file_utils)
        self.synth_service = SynthService(self.config_manager, self.logger, self.file_utils)
        self.pretext_service = PretextService(self.config_manager, self.logger, self.file_utils)
        self.stage_service = StageDiscoveryService(
            self.config_manager, self.logger, self.file_utils
        )
        self.downstream_service = DownstreamService(
            self.config_manager, self.logger, self.file_utils
        )

        self.summary = ExecutionSummary("")
        self.last_error: Optional[BaseException] = None
        self.predict_root: Optional[str] = None

        self.phases: Dict[str, Callable[[], bool]] = {
            "synth": self.synth_phase,
            "pairs": self.pairs_phase,
            "train-pretext": self.train_pretext_phase,
            "embed": self.embed_phase,
            "cluster": self.cluster_phase,
            "pseudo-label": self.pseudo_label_phase,
            "finetune": self.finetune_phase,
            "baseline": self.baseline_phase,
            "evaluate": self.evaluate_phase,
            "agreement": self.agreement_phase,
            "report": self.report_phase,
            "predict": self.predict_phase,
            "run-all": self.run_all_phase,
        }

    # ---------- 路径与产物 ----------

    @property
    def out_dir(self) -> Path:
        return Path(self.config_manager.get_output_config()["dir"])

    @property
    def dataset_root(self) -> Path:
        root = self.config_manager.get_data_config()["root"]
        return Path(root) if root else self.out_dir / "dataset"

    def artifact(self, name: str) -> Path:
        if name == "manifest.json":
            return self.dataset_root / name
        return self.out_dir / name

    def require(self, *names: str) -> None:
        """
        检查上游产物

        Raises:
            MissingArtifactError: 产物缺失，错误信息指出应先运行的子命令
        """
        for name in names:
            if not self.artifact(name).exists():
                raise MissingArtifactError(name, ARTIFACTS[name])

    def human_labels_path(self) -> Optional[Path]:
        configured = self.config_manager.get_downstream_config()["human_labels"]
        if configured:
            return Path(configured)
        default = self.dataset_root / "human_labels.txt"
        return default if default.exists() else None

    def require_human_labels(self) -> Path:
        path = self.human_labels_path()
        if path is None or not path.exists():
            raise MissingArtifactError("human_labels.txt", "synth")
        return path

    def _written(self, *paths: Path) -> None:
        for path in paths:
            self.summary.artifacts.append(str(path))

    def _load_series(self) -> List[WoundSeries]:
        return self.dataset_service.load(self.dataset_root)

    def _load_split(self):
        return self.dataset_service.read_split(self.artifact("split.txt"))

    def _run_phase(self, title: str, body: Callable[[], None]) -> bool:
        """执行单个阶段：异常记录到摘要并返回 False"""
        try:
            self.logger.separator(title)
            body()
            self.logger.success(f"✅ {title}完成")
            return True
        except (HealStageError, MissingArtifactError, ValueError, OSError) as e:
            self.last_error = e
            self.logger.error(f"❌ {title}失败: {e}")
            self.summary.add_error(f"{title}失败: {e}")
            return False

    # ---------- 子命令 ----------

    def synth_phase(self) -> bool:
        def body():
            result = self.synth_service.generate(self.dataset_root)
            truth = result.truth
            self.summary.add_metric("images", len(truth.stages))
            self.summary.add_metric("wounds", len(truth.transitions))
            self._written(self.artifact("manifest.json"), self.dataset_root / "ground_truth.txt")

        return self._run_phase("合成数据集", body)

    def pairs_phase(self) -> bool:
        def body():
            self.require("manifest.json")
            series = self._load_series()
            result = self.dataset_service.build_pairs(series)
            if not result.success:
                raise HealStageError(result.error)
            self.dataset_service.write_split(self.artifact("split.txt"), result.split, series)
            self.dataset_service.write_pairs(self.artifact("pairs.txt"), result.pairs, result.split)
            self.summary.add_metric("pairs", len(result.pairs))
            for part in SPLIT_PARTS:
                self.summary.add_metric(f"{part}_pairs", result.pair_counts[part])
                self.summary.add_metric(f"{part}_images", result.image_counts[part])
            self._written(self.artifact("split.txt"), self.artifact("pairs.txt"))

        return self._run_phase("配对与划分", body)

    def train_pretext_phase(self) -> bool:
        def body():
            self.require("manifest.json", "split.txt", "pairs.txt")
            series = self._load_series()
            pairs = self.dataset_service.read_pairs(self.artifact("pairs.txt"), series)
            result = self.pretext_service.train(pairs)
            ckpt = self.artifact("pretext.ckpt")
            size = save_pretext(ckpt, result.model)
            self.pretext_service.write_history(self.artifact("pretext_history.txt"), result.history)
            rows = [
                (part, result.pair_counts[part], result.accuracy[part], result.loss[part])
                for part in SPLIT_PARTS
                if part in result.accuracy
            ]
            metrics_path = self.out_dir / "pretext_metrics.txt"
            self.file_utils.write_table(metrics_path, ("split", "pairs", "accuracy", "loss"), rows)
            for part in SPLIT_PARTS:
                self.summary.add_metric(f"{part}_pairs", result.pair_counts[part])
                if part in result.accuracy:
                    self.summary.add_metric(f"{part}_accuracy", result.accuracy[part])
            self.summary.add_metric("best_epoch", result.history.best_epoch)
            self.logger.info(f"💾 检查点 {ckpt} ({self.file_utils.format_file_size(size)})")
            self._written(ckpt, self.artifact("pretext_history.txt"), metrics_path)

        return self._run_phase("时间有效性预训练", body)

    def embed_phase(self) -> bool:
        def body():
            self.require("manifest.json", "pretext.ckpt")
            series = self._load_series()
            model = self.pretext_service.load_model(self.artifact("pretext.ckpt"))
            embeddings = embed_all(model, series)
            self.pretext_service.write_embeddings(self.artifact("embeddings.txt"), embeddings)
            self.summary.add_metric("embeddings", len(embeddings))
            self._written(self.artifact("embeddings.txt"))

        return self._run_phase("提取嵌入", body)

    def _read_embeddings(self):
        cohorts = self.dataset_service.read_cohorts(self.artifact("split.txt"))
        return self.pretext_service.read_embeddings(self.artifact("embeddings.txt"), cohorts)

    def cluster_phase(self) -> bool:
        def body():
            self.require("embeddings.txt", "split.txt")
            embeddings = self._read_embeddings()
            split = self._load_split()
            result = self.stage_service.discover(embeddings, split)
            stats_path = self.out_dir / "cluster_stats.txt"
            projection_path = self.out_dir / "projection.txt"
            self.stage_service.write_centroids(self.artifact("centroids.txt"), result.model)
            self.stage_service.write_stats(stats_path, result.stats)
            self.stage_service.write_projection(projection_path, result, embeddings.keys)
            self.summary.add_metric("inertia", result.model.inertia)
            self.summary.add_metric("explained_variance", result.projection.explained.tolist())

            truth_path = self.dataset_root / "ground_truth.txt"
            if truth_path.exists():
                truth = read_ground_truth(truth_path)
                stages = [truth.stages[key] for key in embeddings.keys]
                purity = cluster_purity(result.labels, stages)
                self.summary.add_metric("cluster_purity", purity)
                self.logger.info(f"🧪 簇纯度 (相对合成真值) {purity:.4f}")
            self._written(self.artifact("centroids.txt"), stats_path, projection_path)

        return self._run_phase("聚类", body)

    def pseudo_label_phase(self) -> bool:
        def body():
            self.require("centroids.txt", "embeddings.txt", "split.txt")
            embeddings = self._read_embeddings()
            split = self._load_split()
            centroids = self.stage_service.read_centroids(self.artifact("centroids.txt"))
            mapping, labels = self.stage_service.pseudo_label(centroids, embeddings, split)
            map_path = self.out_dir / "stage_map.txt"
            self.stage_service.write_pseudo_labels(self.artifact("pseudo_labels.txt"), labels)
            self.stage_service.write_mapping(map_path, mapping)
            counts = [0, 0, 0, 0]
            for label in labels:
                counts[label.stage] += 1
            self.summary.add_metric("stage_counts", counts)
            self._written(self.artifact("pseudo_labels.txt"), map_path)

        return self._run_phase("导出伪标签", body)

    def _pseudo_labels(self) -> LabelTable:
        return self.downstream_service.read_labels(self.artifact("pseudo_labels.txt"), "pseudo")

    def _record_evaluations(self, evaluations, prefix: str) -> None:
        for part, evaluation in evaluations.items():
            self.summary.add_metric(f"{prefix}{part}_accuracy", evaluation.accuracy)

    def finetune_phase(self) -> bool:
        def body():
            self.require("manifest.json", "split.txt", "pretext.ckpt", "pseudo_labels.txt")
            series = self._load_series()
            split = self._load_split()
            labels = self._pseudo_labels()
            result = self.downstream_service.finetune(
                self.artifact("pretext.ckpt"), labels, split, series
            )
            history_path = self.out_dir / "finetune_history.txt"
            self.downstream_service.save_model(self.artifact("stage.ckpt"), result.model)
            self.downstream_service.write_history(history_path, result.history)
            self.summary.add_metric("best_epoch", result.history.best_epoch)
            self.summary.add_metric("parameters", result.model.parameter_count())
            self._written(self.artifact("stage.ckpt"), history_path)

        return self._run_phase("阶段分类微调", body)

    def baseline_phase(self) -> bool:
        def body():
            self.require("manifest.json", "split.txt")
            human_path = self.require_human_labels()
            series = self._load_series()
            split = self._load_split()
            labels = self.downstream_service.read_labels(human_path, "human")
            result = self.downstream_service.baseline(labels, split, series)
            ckpt = self.out_dir / "baseline.ckpt"
            history_path = self.out_dir / "baseline_history.txt"
            self.downstream_service.save_model(ckpt, result.model)
            self.downstream_service.write_history(history_path, result.history)
            evaluations = self.downstream_service.evaluate(result.model, labels, split, series)
            self.downstream_service.write_metrics(self.out_dir, evaluations, "baseline_")
            self._record_evaluations(evaluations, "")
            self._written(ckpt, history_path, self.out_dir / "baseline_metrics.txt")

        return self._run_phase("基线训练", body)

    def evaluate_phase(self) -> bool:
        def body():
            self.require("manifest.json", "split.txt", "stage.ckpt", "pseudo_labels.txt")
            series = self._load_series()
            split = self._load_split()
            model = self.downstream_service.load_model(self.artifact("stage.ckpt"))
            evaluations = self.downstream_service.evaluate(
                model, self._pseudo_labels(), split, series
            )
            self.downstream_service.write_metrics(self.out_dir, evaluations, "")
            self._record_evaluations(evaluations, "")
            self._written(self.out_dir / "metrics.txt", self.out_dir / "confusion.txt")

            human_path = self.human_labels_path()
            if human_path is not None and human_path.exists():
                human = self.downstream_service.read_labels(human_path, "human")
                human_evaluations = self.downstream_service.evaluate(model, human, split, series)
                self.downstream_service.write_metrics(self.out_dir, human_evaluations, "human_")
                self._record_evaluations(human_evaluations, "human_")
                self._written(self.out_dir / "human_metrics.txt")

        return self._run_phase("评估", body)

    def agreement_phase(self) -> bool:
        def body():
            self.require("pseudo_labels.txt", "split.txt")
            human_path = self.require_human_labels()
            human = self.downstream_service.read_labels(human_path, "human")
            report = agreement(human, self._pseudo_labels(), self._load_split())
            path = self.out_dir / "agreement.txt"
            self.downstream_service.write_agreement(path, report)
            for part, _, _, fraction in report.rows():
                self.summary.add_metric(f"{part}_agreement", fraction)
                self.logger.info(f"🤝 {part} 一致率 {fraction:.4f}")
            self._written(path)

        return self._run_phase("标注一致率", body)

    def report_phase(self) -> bool:
        def body():
            self.require("pretext_history.txt")
            report_dir = self.out_dir / "report"
            self.file_utils.ensure_dir(report_dir)
            copied = []
            for name in REPORT_FILES:
                source = self.out_dir / name
                if source.exists():
                    self.file_utils.copy_file(source, report_dir / name)
                    copied.append(name)
                else:
                    self.logger.debug(f"报告跳过不存在的文件: {name}")
            self.file_utils.write_json_file(report_dir / "index.json", {"files": copied})
            self.summary.add_metric("report_files", len(copied))
            self._written(report_dir)

        return self._run_phase("汇总报告", body)

    def predict_phase(self) -> bool:
        def body():
            self.require("stage.ckpt")
            root = Path(self.predict_root) if self.predict_root else self.dataset_root
            series = self.dataset_service.load(root)
            model = self.downstream_service.load_model(self.artifact("stage.ckpt"))
            started = time.perf_counter()
            predictions = predict_stages(model, series)
            elapsed = max(time.perf_counter() - started, 1e-9)
            path = self.out_dir / "predictions.txt"
            self.downstream_service.write_predictions(path, predictions)
            self.summary.add_metric("images", len(predictions))
            self.summary.add_metric("images_per_second", len(predictions) / elapsed)
            self.logger.info(f"⚡ {len(predictions) / elapsed:.1f} 张/秒")
            self._written(path)

        return self._run_phase("阶段预测", body)

    def run_all_phase(self) -> bool:
        total = len(RUN_ALL)
        for index, command in enumerate(RUN_ALL, 1):
            if command == "agreement" and self.human_labels_path() is None:
                self.logger.info("📋 没有人工标注，跳过一致率")
                continue
            self.logger.step(command, index, total)
            if not self.phases[command]():
                return False
        return True

    # ---------- 入口 ----------

    def run(self, command: str) -> bool:
        """
        执行一个子命令并写出运行摘要

        Args:
            command: 子命令名

        Returns:
            是否成功
        """
        if command not in self.phases:
            raise ValueError(f"未知子命令: {command}")
        self.summary = ExecutionSummary(command)
        self.summary.seed = self.config_manager.get_seed()
        self.summary.config = self.config_manager.snapshot()
        self.last_error = None

        self.file_utils.ensure_dir(self.out_dir)
        log_file = self.config_manager.get_logging_config()["log_file"]
        if log_file:
            self.logger.attach_file(self.out_dir / log_file)

        started = time.perf_counter()
        try:
            self.logger.header(f"heal-stage 流水线: {command} (seed={self.summary.seed})")
            success = self.phases[command]()
        except KeyboardInterrupt:
            self.logger.warning("⚠️ 用户中断执行")
            self.summary.add_warning("用户中断执行")
            raise
        finally:
            self.summary.wall_time = time.perf_counter() - started
            self.write_summary()
            self.logger.close_file()
        self.show_summary()
        return success

    def write_summary(self) -> Path:
        path = self.out_dir / f"{self.summary.command}.summary.json"
        self.file_utils.write_json_file(path, self.summary.to_dict())
        return path

    def show_summary(self) -> None:
        """
        显示执行摘要
        """
        self.logger.separator("执行摘要")
        self.logger.info(f"⏱️ 用时 {self.summary.wall_time:.2f} 秒")
        for name, value in self.summary.metrics.items():
            self.logger.info(f"   {name}: {value}")
        if self.summary.warnings:
            self.logger.info(f"⚠️ 警告信息 ({len(self.summary.warnings)} 个):")
            for warning in self.summary.warnings:
                self.logger.warning(f"   {warning}")
        if self.summary.errors:
            self.logger.info(f"❌ 错误信息 ({len(self.summary.errors)} 个):")
            for error in self.summary.errors:
                self.logger.error(f"   {error}")

    def get_execution_summary(self) -> ExecutionSummary:
        """
        获取执行摘要

        Returns:
            执行摘要对象
        """
        return self.summary
