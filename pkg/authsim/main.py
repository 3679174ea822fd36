import sys

from dotenv import load_dotenv

from authsim import cli
from authsim.config import load_settings
from authsim.logging_config import setup_logging


def main(argv: list[str] | None = None) -> int:
    load_dotenv()

    settings = load_settings()
    log_cfg = settings.get("logging", {})
    setup_logging(level=log_cfg.get("level", "INFO"), log_dir=log_cfg.get("dir") or None)

    return cli.run(argv, settings)


if __name__ == "__main__":
    sys.exit(main())
