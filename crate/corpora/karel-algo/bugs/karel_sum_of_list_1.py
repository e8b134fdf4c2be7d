def sum_list(a):
    total = 0
    while a.has_next():
        total += a.get_value()
        a.go_next()
    return total
