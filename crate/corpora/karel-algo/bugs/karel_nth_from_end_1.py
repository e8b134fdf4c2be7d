def nth_from_end(a, n):
    while a.has_next():
        a.go_next()
    for _ in range(n):
        a.go_prev()
    return a.get_value()
