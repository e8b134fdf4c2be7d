def unique_day(day, birthdays):
    count = 0
    for month, d in birthdays:
        if month == day:
            count += 1
    return count == 1
