import os

from dotenv import load_dotenv

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))  # Project Root

load_dotenv()

# Defaults for the experiment CLI, overridable through a .env file at the project root
OUTPUT_DIR = os.environ.get("KNNBALL_OUTPUT_DIR", os.path.join(ROOT_DIR, "experiments"))
DEFAULT_THREADS = int(os.environ.get("KNNBALL_THREADS", "1"))
DEFAULT_SEED = int(os.environ.get("KNNBALL_SEED", "7"))
LOG_LEVEL = os.environ.get("KNNBALL_LOG_LEVEL", "WARNING")
