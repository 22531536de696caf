"""Two-layer patch-wise ReLU model and the masked training step it is analysed with."""

from .model import (TheoryConfig, TheoryModelState, forward_full, forward_subnetwork, grad_full, grad_subnetwork,
                    indicator_expectation, indicator_expectation_mc, init_theory_model, initial_loss_bound,
                    ntk_finite, ntk_infinite, patch_dataset, smallest_eigenvalue, squared_error)
from .loft import (DeviationReport, MaskMatrix, MomentTable, coverage_probability, exact_nu2_offdiag, fit_log_slope,
                   gd_step, loft_step, mask_moments, mixed_output_direction, predicted_log_rate,
                   run_paired_trajectories, sample_masks)
