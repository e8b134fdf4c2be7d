def sort_age(lst):
    result = lst.sort(key=lambda person: person[1], reverse=True)
    return result
