values = [0, 7, 1_000_000, 0xFF, 0o17, 0b1010, 3.14, .5, 1., 1e10, 2.5E-3, 3j, 1_0.0_1]
