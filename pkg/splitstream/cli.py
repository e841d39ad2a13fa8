"""
splitstream 命令行接口

子命令：
- run：按配置运行一个实验组
- compare：比较两个指标 CSV
- eval：载入检查点并在给定预算下评估
"""
import argparse
import json
import sys

from splitstream.utils.errors import SplitStreamError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_REACHED = 2


def run_command(args) -> int:
    """运行实验"""
    from splitstream.core.config import apply_overrides, load_config
    from splitstream.core.experiment import run_experiment

    cfg = apply_overrides(load_config(args.config), arm=args.arm, seed=args.seed, role=args.role,
                          listen=args.listen, connect=args.connect, output=args.out)
    path = run_experiment(cfg)
    print(f"指标已写入 {path}")
    return EXIT_OK


def compare_command(args) -> int:
    """比较两次运行"""
    from splitstream.core.metrics import compare_runs

    report = compare_runs(args.a, args.b, tolerance=args.tolerance, threshold=args.threshold)
    print(json.dumps(report.to_dict(), ensure_ascii=False))
    return EXIT_OK if report.reached else EXIT_NOT_REACHED


def eval_command(args) -> int:
    """评估检查点"""
    from splitstream.core.config import load_config
    from splitstream.core.experiment import evaluate_checkpoint

    cfg = load_config(args.config)
    if args.dataset is not None:
        cfg = cfg.model_copy(update={'dataset': cfg.dataset.model_copy(update={'root': args.dataset})})
    acc = evaluate_checkpoint(cfg, args.checkpoint, args.budget)
    print(f"{acc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="splitstream 分割学习命令行工具")
    subparsers = parser.add_subparsers(dest="command", help="子命令")

    # run子命令
    run_parser = subparsers.add_parser("run", help="运行一个实验组")
    run_parser.add_argument("--config", required=True, help="实验配置 YAML 文件")
    run_parser.add_argument("--arm", default=None, help="覆盖实验组")
    run_parser.add_argument("--role", choices=["client", "server", "loopback"], default=None,
                            help="链路角色 (client/server 使用 tcp)")
    run_parser.add_argument("--listen", default=None, help="服务端监听端点 host:port")
    run_parser.add_argument("--connect", default=None, help="客户端连接端点 host:port")
    run_parser.add_argument("--seed", type=int, default=None, help="覆盖随机种子")
    run_parser.add_argument("--out", default=None, help="指标 CSV 输出路径")
    run_parser.set_defaults(func=run_command)

    # compare子命令
    compare_parser = subparsers.add_parser("compare", help="比较两个指标 CSV")
    compare_parser.add_argument("--a", required=True, help="运行 A 的指标 CSV")
    compare_parser.add_argument("--b", required=True, help="运行 B 的指标 CSV（目标准确率来源）")
    compare_parser.add_argument("--tolerance", type=float, default=0.02, help="准确率匹配容差 (默认: 0.02)")
    compare_parser.add_argument("--threshold", type=float, default=0.95,
                                help="加速比所用的目标准确率比例 (默认: 0.95)")
    compare_parser.set_defaults(func=compare_command)

    # eval子命令
    eval_parser = subparsers.add_parser("eval", help="评估检查点")
    eval_parser.add_argument("--config", required=True, help="描述模型与数据集的实验配置")
    eval_parser.add_argument("--checkpoint", required=True, help="检查点文件 (.splt)")
    eval_parser.add_argument("--budget", type=int, required=True, help="评估时传输的通道数 b")
    eval_parser.add_argument("--dataset", default=None, help="覆盖数据集根目录")
    eval_parser.set_defaults(func=eval_command)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        sys.exit(EXIT_ERROR)
    try:
        code = args.func(args)
    except (SplitStreamError, OSError) as e:
        print(f"错误: {e}", file=sys.stderr)
        code = EXIT_ERROR
    sys.exit(code)


if __name__ == "__main__":
    main()
