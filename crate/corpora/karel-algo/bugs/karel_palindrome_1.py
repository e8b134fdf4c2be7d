def is_palindrome(a, b):
    while a.has_next():
        a.go_next()
    while True:
        b.set_value(a.get_value())
        if not a.has_prev():
            break
        a.go_prev()
        b.go_next()
    while b.has_prev():
        b.go_prev()
    while True:
        if a.get_value() != b.get_value():
            return True
        if not a.has_next():
            return False
        a.go_next()
        b.go_next()
