#!/usr/bin/env python3
"""Serve the review workbench over the demo checkpoint. Run 02 and 03
first, then open http://127.0.0.1:8321/prototypes (or point the browser
frontend at it) and poke around:

    GET  /session                    session summary
    GET  /prototypes                 scoring sheet, one card per prototype
    GET  /prototypes/3/patches?k=6   where p3 fires, as PNG crops
    POST /prototypes/3/disable       intervention (logged)
    GET  /metrics?subset=test        accuracy/F1/sparsity/size metrics
    POST /evaluate                   async re-evaluation, poll /jobs/<id>
    GET  /shortcuts                  artifact-overlap scan
    POST /counterfactual             artifact-insertion stress test
    POST /predict                    upload a PNG, get explained scores
"""

import pathlib

import uvicorn

from protoscope.server import build_app

OUT = pathlib.Path(__file__).resolve().parent / "_out"

app = build_app(OUT / "checkpoint", OUT / "data")

if __name__ == "__main__":
    uvicorn.run(app, host="127.0.0.1", port=8321)
