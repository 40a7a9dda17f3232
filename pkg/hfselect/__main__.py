"""Entry point for the hfselect command line."""
import os
import sys

# Load environment variables from HFSELECT_ENV_FILE if specified
env_file = os.getenv("HFSELECT_ENV_FILE")
if env_file:
    from dotenv import load_dotenv
    load_dotenv(env_file, override=True)

from .cli import main as cli_main  # noqa: E402


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
