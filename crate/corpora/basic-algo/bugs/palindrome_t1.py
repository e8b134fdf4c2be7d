def is_palindrome(s):
    if s == reversed(s):
        return 1
    return 0
