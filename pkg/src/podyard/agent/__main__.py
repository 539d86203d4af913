"""Run a node agent configured from the environment.

Blocks until walltime expires or a termination signal arrives, then kills
all pod process groups and exits.
"""
import logging
import signal
import sys

from .agent import Agent
from .config import AgentConfig


def main() -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = AgentConfig.from_env()
    except ValueError as exc:
        print(f"agent configuration error: {exc}", file=sys.stderr)
        return 2
    agent = Agent(config)

    def on_signal(signum, frame):
        agent.shutdown()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    agent.start()
    agent.run_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
