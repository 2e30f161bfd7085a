#!/usr/bin/env python3

"""
heal-stage 伤口愈合阶段流水线主程序
每个子命令执行一个阶段，输出单行可解析的错误信息和退出码
"""

import argparse
import os
import sys
from typing import List, Optional

from src.app import StagePipeline
from src.utils.errors import HealStageError, MissingArtifactError

DEFAULT_CONFIG = "config.json"

COMMANDS = {
    "synth": "生成合成伤口数据集",
    "pairs": "按伤口划分数据集并生成时间顺序图像对",
    "train-pretext": "训练时间有效性预训练模型",
    "embed": "为每张图像提取 16 维嵌入",
    "cluster": "k-means 聚类、簇天数统计和 PCA 投影",
    "pseudo-label": "把簇映射为愈合阶段并导出伪标签",
    "finetune": "在伪标签上微调阶段分类器",
    "baseline": "在人工标注上从头训练同结构基线",
    "evaluate": "评估阶段分类器",
    "agreement": "人工标注与伪标签的一致率",
    "report": "汇总可用于绘图的列文本报告",
    "predict": "用阶段分类器预测任意数据集",
    "run-all": "依次执行完整流水线",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", default=None, help="配置文件路径（默认 config.json，如存在）"
    )
    common.add_argument("--out", default=None, help="输出目录，覆盖 output.dir")
    common.add_argument("--seed", type=int, default=None, help="随机种子，覆盖 seed")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="覆盖任意配置字段，可重复",
    )

    parser = argparse.ArgumentParser(description="伤口愈合阶段自监督流水线")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if name == "predict":
            sub.add_argument(
                "--data", default=None, help="待预测数据集目录（默认 data.root）"
            )
        if name == "synth":
            sub.add_argument(
                "--noise", type=float, default=None, help="像素噪声，覆盖 synth.noise"
            )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)
    config_path = args.config
    if config_path is None and os.path.exists(DEFAULT_CONFIG):
        config_path = DEFAULT_CONFIG

    overrides = list(args.overrides)
    if getattr(args, "noise", None) is not None:
        overrides.append(f"synth.noise={args.noise!r}")

    try:
        pipeline = StagePipeline(config_path, args.out, args.seed, overrides)
        pipeline.predict_root = getattr(args, "data", None)
        if pipeline.run(args.command):
            return 0
        error = pipeline.last_error
        if isinstance(error, (HealStageError, MissingArtifactError)):
            print(error.one_line(), file=sys.stderr)
        elif error is not None:
            print(f"ERROR {type(error).__name__}: {error}", file=sys.stderr)
        return 1

    except KeyboardInterrupt:
        print("\n⚠️ 用户中断执行", file=sys.stderr)
        return 130  # 标准的键盘中断退出码

    except (HealStageError, MissingArtifactError) as e:
        print(e.one_line(), file=sys.stderr)
        return 1

    except Exception as e:
        print(f"ERROR {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
