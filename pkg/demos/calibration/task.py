answer = doc.simple_query("Is it relevant?")
return answer
