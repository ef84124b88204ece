from hypothesis import settings

# deterministic, bounded property runs so the suite behaves the same everywhere
settings.register_profile("suite", derandomize=True, max_examples=50, deadline=None)
settings.load_profile("suite")
