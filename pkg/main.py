#!/usr/bin/env python3
"""
Scene Fusion - Main Entry Point

Easy launcher for the scene-fusion command line.

Usage:
    python main.py train --stage graph_stream   # Any scene-fusion command
    python main.py --example                    # Run the walkthrough in example.py
    python main.py --test                       # Run tests
"""

import argparse
import sys


def run_cli(argv):
    """Run a scene-fusion command."""
    sys.path.insert(0, "src")

    from cli import main as cli_main

    sys.exit(cli_main(argv))


def run_example():
    """Run the walkthrough."""
    sys.path.insert(0, "src")
    import example

    example.main()


def run_tests():
    """Run the test suite."""
    import subprocess

    result = subprocess.run([sys.executable, "-m", "pytest", "tests/", "-v"])
    sys.exit(result.returncode)


def main():
    parser = argparse.ArgumentParser(
        description="Scene Fusion - two-stream scene understanding",
        add_help=False,
    )
    parser.add_argument(
        "--example",
        action="store_true",
        help="Run the example walkthrough",
    )
    parser.add_argument(
        "--test",
        action="store_true",
        help="Run test suite",
    )

    args, rest = parser.parse_known_args()

    if args.test:
        run_tests()
    elif args.example:
        run_example()
    else:
        # Default to the command line
        run_cli(rest)


if __name__ == "__main__":
    main()
