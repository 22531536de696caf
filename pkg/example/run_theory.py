import numpy as np
import loftlab
from loftlab.harness import DatasetSpec, load_dataset
from loftlab.theory import TheoryConfig, fit_log_slope, predicted_log_rate, run_paired_trajectories


if __name__ == "__main__":
    loftlab.FileManager.saving_enabled = False
    loftlab.Logger.setLevel("INFO")

    cfg = TheoryConfig(m=1024, n=8, xi=0.5, S=4, T=200, seed=0)
    spec = DatasetSpec(source="synthetic_theory", n=cfg.n, h=cfg.side, w=cfg.side, normalize=True)
    data = load_dataset(spec, loftlab.Randomizer.stream(cfg.seed, "data"), q=cfg.q)

    report = run_paired_trajectories(cfg, data.train, dataset_seed=cfg.seed)
    print(f"lambda0 = {report.lambda0:.4e}, eta = {report.eta:.4e}, theta = {report.theta:.4f}")
    print(f"||W_T - What_T||^2 = {report.weight_dev:.3e}")
    print(f"sum_t ||u_t - uhat_t||^2 = {report.output_dev_sum:.3e}")
    print(f"max drift = {report.weight_drift:.3e}")

    slope = fit_log_slope(report.loss_curve)
    print(f"fitted log slope {slope:.3e}, predicted {predicted_log_rate(report.theta, report.eta, report.lambda0):.3e}")
    print("loss every 20 iterations:", np.round(report.loss_curve[::20], 6))
