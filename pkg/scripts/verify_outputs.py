import sys
from pathlib import Path

from fpt_perturb.verify import verify_outputs


if __name__ == "__main__":
    verify_outputs(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out"))
    print("Verification passed")
