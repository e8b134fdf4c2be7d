def top_k(lst, k):
    return sorted(set(lst), reverse=True)[:k]
