import sys

from ui_controller import run_app

if __name__ == "__main__":
    sys.exit(run_app())
