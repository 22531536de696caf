import loftlab
from loftlab.harness import DatasetSpec, load_dataset
from loftlab.harness.config import FinetuneConfig
from loftlab.harness.pipeline import finetune
from loftlab.metrics import apply_ticket, distance_to_final, prune_filters


if __name__ == "__main__":
    loftlab.FileManager.saving_enabled = False
    seed = 0

    data = load_dataset(DatasetSpec(n=400), loftlab.Randomizer.stream(seed, "data"))
    spec = loftlab.ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16, 32], 4)
    initial = loftlab.init_weights(spec, loftlab.Randomizer.stream(seed, "init"))
    schedule = loftlab.ScheduleConfig(workers=2, rounds=20, local_iterations=10, eta=0.05, eta_schedule="cosine",
                                      batch_size=32)

    for name, run in (("loft", loftlab.run_loft_pretrain), ("local_sgd", loftlab.run_local_sgd)):
        weights, ledger, snapshots = run(initial, spec, data.train, schedule, seed=seed)
        curve = distance_to_final(snapshots)
        print(f"{name}: {ledger.total_bytes} bytes, ranking distance to final {curve[0]:.3f} -> {curve[len(curve) // 2]:.3f}")
        for ratio in (0.3, 0.5, 0.8):
            pruned, pruned_spec = apply_ticket(weights, spec, prune_filters(weights, spec, ratio))
            _, accuracies = finetune(pruned, pruned_spec, data, FinetuneConfig(), 10,
                                     loftlab.Randomizer.stream(seed, "finetune", schedule.rounds))
            print(f"  ratio {ratio}: accuracy {accuracies[0]:.3f} -> {accuracies[-1]:.3f}")
