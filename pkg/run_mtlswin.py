#!/usr/bin/env python3
"""
MTL-Swin-Unet desk-scale runner

Prerequisites:
1. Python 3.11 installed
2. Install dependencies: pip install -r requirements.txt
3. Optionally copy .env.example to .env to set MTLSWIN_THREADS / MTLSWIN_LOG_LEVEL

Usage:
    python run_mtlswin.py gen-data --out data/
    python run_mtlswin.py train --config configs/mtl_desk.cfg --set data=data/ --out runs/mtl
"""

import sys


def check_dependencies():
    """Check if required dependencies are installed"""
    required_packages = [
        'torch', 'numpy', 'pandas', 'sklearn', 'scipy', 'einops',
        'PIL', 'matplotlib', 'loguru', 'pydantic_settings', 'dotenv'
    ]

    missing_packages = []
    for package in required_packages:
        try:
            __import__(package)
        except ImportError:
            missing_packages.append(package)

    if missing_packages:
        print(f"Missing required packages: {', '.join(missing_packages)}", file=sys.stderr)
        print("Please install them with: pip install -r requirements.txt", file=sys.stderr)
        return False
    return True


if __name__ == "__main__":
    if not check_dependencies():
        sys.exit(1)

    from mtlswin.cli import main

    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        sys.exit(130)
