def unique_day(day, birthdays):
    count = 0
    for month, d in birthdays:
        if d == day:
            count += 1
    return count >= 1
