# Strip the CUDA stack from the exported requirements: the training image
# ships torch, triton and the nvidia wheels already.

import argparse
import pathlib
import sys

PREINSTALLED_PREFIXES = ("torch==", "triton==", "nvidia-")


def is_preinstalled(requirement: str) -> bool:
    return requirement.strip().lower().startswith(PREINSTALLED_PREFIXES)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Drop the packages the CUDA base image already provides")
    parser.add_argument(
        "original_requirements_path",
        type=pathlib.Path,
        help="Requirements exported by poetry for diff_fae",
    )
    parser.add_argument(
        "torch_free_requirements_path",
        type=pathlib.Path,
        help="Where the requirements without the CUDA stack are written",
    )
    args = parser.parse_args(argv)

    lines = args.original_requirements_path.read_text().splitlines(keepends=True)
    kept = [line for line in lines if not is_preinstalled(line)]
    args.torch_free_requirements_path.write_text("".join(kept))
    print(f"Kept {len(kept)} of {len(lines)} requirements in {args.torch_free_requirements_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
