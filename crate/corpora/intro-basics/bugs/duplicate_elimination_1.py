def remove_extras(lst):
    result = []
    for x in lst:
        if x in lst:
            result.append(x)
    return result
