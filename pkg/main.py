"""
Main entry point for the crashsynth command-line pipeline.
"""

from crashsynth.cli import main

if __name__ == "__main__":
    main()
