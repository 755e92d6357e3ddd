"""
A shared split file
===================

Open-set benchmarks repeat the known/unknown partition K times.  Writing the
partitions to a file lets other runs use exactly the same trials.
"""

from omcl.data import make_splits, read_split_file, write_split_file

# eight blood-cell classes, five trials of four known classes each
splits = make_splits(8, 5, master_seed=2023)
for s in splits:
    print(s.k, "known", s.known, "unknown", s.unknown)

# four retina classes where the healthy class (id 3 here) is always known
for s in make_splits(4, 3, master_seed=2023, pinned=[3]):
    print("oct trial", s.k, s.known)

path = write_split_file("splits_demo.json", splits, dataset="bloodmnist")
print(read_split_file(path)[1] == splits)
