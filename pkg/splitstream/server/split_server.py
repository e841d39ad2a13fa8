"""
分割训练服务端模块

在后台线程中运行服务端会话：等待客户端的前向帧，完成解压、后半段网络的前向/反向与参数更新，
回复梯度；同时处理控制消息与推理请求。
"""

import logging
import threading
from typing import Optional

from splitstream.core import schedules
from splitstream.server.link import Link, link_listen
from splitstream.utils.errors import ValidationError

logger = logging.getLogger(__name__)


class SplitServer:
    """分割训练服务端，一个实例服务一个客户端会话"""

    def __init__(self, half: 'schedules.ServerHalf', plan: 'schedules.TrainPlan', link: Link):
        """
        初始化服务端

        Args:
            half: 服务端半模型（解压模块 + 层 n+1..L）
            plan: 与客户端一致的训练计划
            link: 服务端链路（link_listen 或 loopback_link 的第二个返回值）
        """
        if link.role != 'server':
            raise ValidationError(f"SplitServer 需要服务端链路，got role={link.role!r}")
        self.half = half
        self.plan = plan
        self.link = link
        self.running = False
        self.server_thread: Optional[threading.Thread] = None
        self.summary: Optional[schedules.ServerSummary] = None
        self.error: Optional[BaseException] = None

    @classmethod
    def listen(cls, half: 'schedules.ServerHalf', plan: 'schedules.TrainPlan', endpoint: str,
               timeout_s: float = 60.0) -> 'SplitServer':
        return cls(half, plan, link_listen(endpoint, timeout_s))

    def _server_loop(self):
        """服务器主循环"""
        try:
            self.summary = schedules.deprune_server_loop(self.half, self.plan, self.link,
                                                         stop=lambda: not self.running)
        except Exception as e:
            if self.running:
                logger.error(f"服务端会话发生错误: {e}")
                self.error = e
        finally:
            self.running = False
            self._cleanup()

    def _cleanup(self):
        """清理资源"""
        self.link.close()
        logger.info("服务端资源已清理")

    def start(self):
        """启动服务器"""
        if self.running:
            logger.warning("服务器已经在运行")
            return
        self.running = True
        self.server_thread = threading.Thread(target=self._server_loop, name='splitstream-server', daemon=True)
        self.server_thread.start()
        logger.info(f"服务端启动成功: {self.link.address}")

    def join(self, timeout: Optional[float] = None) -> bool:
        """等待会话结束，返回线程是否已退出"""
        if self.server_thread is not None:
            self.server_thread.join(timeout)
            return not self.server_thread.is_alive()
        return True

    def stop(self):
        """停止服务器：轮询间隙检查运行标志，最多等待一个轮询周期后退出"""
        if not self.running:
            self.join(timeout=5.0)
            return
        self.running = False
        logger.info("正在停止服务端...")
        if not self.join(timeout=5.0):
            logger.warning("服务端线程未能在 5 秒内退出")
        logger.info("服务端已停止")

    def is_running(self) -> bool:
        """检查服务器是否在运行"""
        return bool(self.running and self.server_thread and self.server_thread.is_alive())


def main():
    """命令行入口点：以服务端角色运行实验配置"""
    import argparse
    import signal
    import sys

    from splitstream.core.config import apply_overrides, load_config
    from splitstream.core.experiment import run_experiment

    parser = argparse.ArgumentParser(description="启动分割训练服务端")
    parser.add_argument("--config", required=True, help="实验配置 YAML 文件")
    parser.add_argument("--listen", default="127.0.0.1:5555", help="监听端点 host:port (默认: 127.0.0.1:5555)")
    parser.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")
    parser.add_argument("--out", default=None, help="指标 CSV 输出路径")
    args = parser.parse_args()

    cfg = apply_overrides(load_config(args.config), role='server', listen=args.listen,
                          seed=args.seed, output=args.out)

    def signal_handler(sig, frame):
        print("\n收到停止信号，正在关闭服务器...")
        sys.exit(1)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    print(f"启动服务端在 {args.listen}")
    try:
        run_experiment(cfg)
    except Exception as e:
        print(f"服务端异常退出: {e}")
        sys.exit(1)
    print("服务器已停止")


if __name__ == "__main__":
    main()
