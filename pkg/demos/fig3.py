patches = image_patch.find("black drink")
result = False
for patch in patches:
    answer = patch.simple_query("Is this a Coke?")
    if answer == "yes":
        result = True
return result
