import sys
from pathlib import Path

# Add the project root to sys.path so `core`, `config` and `store` import from any test directory
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))
