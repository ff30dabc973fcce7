#!/usr/bin/env python3
"""
Standalone MCP server script for the moelora toolkit.
This module is designed to be run directly with the MCP CLI using:
    mcp run /path/to/moelora/server.py

Tool runs write their CSV files under MOELORA_OUTDIR (default ``runs``):
    mcp install server.py -v MOELORA_OUTDIR=/tmp/moelora-runs
"""

import logging
import os
import sys
from pathlib import Path

# Add the parent directory to the path to allow imports
sys.path.insert(0, str(Path(__file__).parent.parent))

try:
    from moelora.mcp_impl import mcp
except ImportError:
    # Fallback for when running as a standalone script
    from mcp_impl import mcp  # type: ignore

if __name__ == "__main__":
    # stdout carries the protocol, so logs go to stderr
    logging.basicConfig(
        level=os.environ.get("MOELORA_LOG_LEVEL", "WARNING").upper(),
        stream=sys.stderr,
    )

    # Run the FastMCP server
    try:
        mcp.run(transport="stdio")
    except Exception:
        sys.exit(1)
