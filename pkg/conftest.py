import os
import sys

import matplotlib

matplotlib.use("Agg")

# flat layout: modules live next to this file
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
