"""Encodes a fixed corpus with tiktoken's GPT-2 ranks to produce reference token ids.
Usage: make_tokenizer_fixture.py path/to/gpt2.tiktoken"""
import json
import sys
import tiktoken
from tiktoken.load import load_tiktoken_bpe
pat = r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
enc = tiktoken.Encoding("gpt2", pat_str=pat, mergeable_ranks=load_tiktoken_bpe(sys.argv[1]), special_tokens={"<|endoftext|>":50256})
sents = [
 "When Mary and John went to the store, John gave a drink to",
 "The war lasted from the year 1741 to the year 17",
 "The doctor offered apples to the nurse because she had too many of them. The pronoun she refers to the",
 "Hello world!", "  leading spaces and trailing   ", "Tabs\tand\nnewlines\n\n", "Don't you think it's they're we've I'm you'll he'd?",
 "Numbers: 3.14159, 2,718 and 1e-10; 0x1F.", "Ünïcödé façade naïve café — résumé", "日本語のテキストも大丈夫です。", "Emoji 🚀🔥 test 👍🏽",
 "Mixed CASE words LikeThis andTHAT", "a" * 40, "   ", "\n", "!!!???...", "C++ templates<typename T> and std::vector<int>",
 "email@example.com https://example.org/path?q=1&r=2", "Ελληνικά κείμενα", "Привет, как дела?", "مرحبا بالعالم",
 "The quick brown fox jumps over the lazy dog.", "It was the best of times, it was the worst of times.",
 "In 1999, 12345678 people said 'yes'.", "He said \"no\" -- then left.", "x = y + z * (a - b) / c",
 "Line one\r\nLine two\r\n", "    indented code block", "tab\t\tdouble", "’curly quotes’ and “double”",
 "Greater than 1600 and less than 1700", "The year 2023 was followed by 2024", "Then, Anna and Bob had a long argument, and afterwards Anna said to",
 "Friends Tom and Lily found a ring at the garden. Tom gave it to", "The chief hired the assistant because he needed help.",
 "AAAAaaaaBBBBbbbb", "snake_case_identifier and kebab-case-id", "#hashtag @mention $dollar %percent", "ĀāĂă",
 "zero-width​joiner", "non breaking space", "trailing space ", " ", "multiple     spaces     here",
 "The pronoun he refers to the", "The 's 't 're suffixes", "rock'n'roll isn't dead", "1741 1742 1743 1799 1800",
 "End.", "Ollie's dogs' bowls"]
assert len(sents) == 50
with open("tests/fixtures/tokenizer_corpus.jsonl", "w") as f:
    for s in sents:
        f.write(json.dumps({"text": s, "ids": enc.encode(s)}, ensure_ascii=False) + "\n")
print(enc.encode(" 1741"))
