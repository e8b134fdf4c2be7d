def nth_from_end(a, n):
    for _ in range(n - 1):
        a.go_next()
    return a.get_value()
