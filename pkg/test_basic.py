#!/usr/bin/env python3
"""
Basic smoke test: simulate a small panel, fit both models and cross-validate
the mean baseline, without any input files.
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

import numpy as np

from synth import SimConfig, simulate
from mesh import build_mesh

def test_imports():
    """Test that all modules can be imported"""
    print("Testing imports...")

    from domain import Dataset, RegionGrid
    print("[OK] domain imported successfully")

    from engine import fit, marginal_loglik
    print("[OK] engine imported successfully")

    from models import build_gmrf, build_lmm, predict
    print("[OK] models imported successfully")

    from validation import run_cv, h_sweep
    print("[OK] validation imported successfully")

    from ingest import ingest_csv
    print("[OK] ingest_csv imported successfully")

def test_fit_models():
    """Fit the LMM and the GMRF on a small synthetic panel"""
    print("Testing model fits...")
    from models import fit_model

    data, _ = simulate(SimConfig(n_stations=15, n_days=3, domain_km=60.0, seed=2))
    print(f"Simulated {len(data)} rows from {len(data.stations)} stations")

    lmm, _ = fit_model("lmm", data, max_rounds=2)
    print(f"  LMM loglik:  {lmm.loglik:.3f}")
    mesh = build_mesh(data.stations, max_edge=20.0)
    gmrf, _ = fit_model("gmrf", data, mesh=mesh, max_rounds=1)
    print(f"  GMRF loglik: {gmrf.loglik:.3f} (mesh with {mesh.m} nodes)")

    assert np.isfinite(lmm.loglik)
    assert np.isfinite(gmrf.loglik)

def test_cross_validation():
    """Cross-validate the mean baseline"""
    print("Testing cross-validation...")
    from validation import make_folds_kfold, run_cv

    data, _ = simulate(SimConfig(n_stations=20, n_days=5, seed=4))
    report = run_cv(data, "mean", make_folds_kfold(data, 5, seed=1))
    print(f"  mean baseline RMSE: {report.rmse:.3f}, R2: {report.r2:.3f}")

    assert report.n == len(data)

def main():
    """Run all tests"""
    print("="*50)
    print("SPATIO-TEMPORAL PM2.5 TOOLKIT - BASIC TESTS")
    print("="*50)

    tests = [test_imports, test_fit_models, test_cross_validation]
    tests_passed = 0

    for test in tests:
        try:
            test()
            tests_passed += 1
        except Exception as e:
            print(f"[ERROR] {test.__name__}: {e}")
        print()

    print("="*50)
    print(f"TEST RESULTS: {tests_passed}/{len(tests)} tests passed")

    if tests_passed == len(tests):
        print("SUCCESS: All basic functionality tests passed!")
        print("\nTo use the full system:")
        print("1. Run: python cli.py simulate --output-dir output")
        print("2. Run: python cli.py fit --input output/data.csv")
        print("3. Run: python cli.py cv --input output/data.csv --models mean,lmm,gmrf")
    else:
        print("FAILED: Some tests failed. Please check the errors above.")

    print("="*50)

if __name__ == "__main__":
    main()
