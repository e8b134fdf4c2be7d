def sum_list(a):
    total = 0
    while a.has_next():
        a.go_next()
        total += a.get_value()
    return total
