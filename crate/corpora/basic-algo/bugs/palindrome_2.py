def is_palindrome(s):
    for i in range(len(s) // 2 - 1):
        if s[i] != s[len(s) - 1 - i]:
            return 0
    return 1
