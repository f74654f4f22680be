"""
Seed derivation.

Every random stream is ``np.random.SeedSequence([root, subsystem, *extra])``
with one fixed subsystem id per consumer, so changing e.g. the number of
training epochs never shifts the world, the data or the initial weights.
"""

SEED_WORLD = 0  # world build: durations, embeddings, hash key
SEED_TRAIN_SPLIT = 1  # training records
SEED_TEST_SPLIT = 2  # held-out records
SEED_TRAIN_LOOP = 3  # per-epoch curriculum draws and batch plans, extra = epoch
SEED_MODEL_INIT = 4  # parameter initialization
SEED_GENERATE = 5  # sampling during generation, root = generation seed
