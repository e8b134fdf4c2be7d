def is_palindrome(a, b):
    while a.has_next():
        b.set_value(a.get_value())
        a.go_next()
        if b.has_next():
            b.go_next()
    b.set_value(a.get_value())
    while a.has_prev():
        if a.get_value() != b.get_value():
            return False
        a.go_prev()
        if b.has_prev():
            b.go_prev()
    return True
