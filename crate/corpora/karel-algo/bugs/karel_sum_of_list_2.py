def sum_list(a):
    total = 0
    while True:
        total += a.get_value()
        a.go_next()
    return total
