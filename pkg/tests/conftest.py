import sys
from pathlib import Path

# allow `from test_training import OracleModel` across test modules
sys.path.insert(0, str(Path(__file__).parent))
