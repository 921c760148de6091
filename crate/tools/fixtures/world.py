"""Synthetic news world used to build the offline test fixtures.

Produces CoNLL-2003 formatted train/test files, a pretraining text corpus for
the fixture language model, a landmark->country relation dataset and a
mention frequency table (counts of each mention in the pretraining corpus).
Everything is a pure function of the seed.
"""

import json
import random
import re
from collections import Counter

COUNTRIES = [
    ("France", "French"), ("Germany", "German"), ("Italy", "Italian"),
    ("Spain", "Spanish"), ("Brazil", "Brazilian"), ("New Zealand", "New Zealander"),
    ("South Africa", "South African"), ("United States", "American"),
    ("Czech Republic", "Czech"), ("Japan", "Japanese"), ("China", "Chinese"),
    ("Russia", "Russian"), ("England", "English"), ("Australia", "Australian"),
    ("Portugal", "Portuguese"), ("Netherlands", "Dutch"), ("Belgium", "Belgian"),
    ("Sweden", "Swedish"), ("Norway", "Norwegian"), ("Poland", "Polish"),
    ("Argentina", "Argentine"), ("Egypt", "Egyptian"), ("India", "Indian"),
    ("Pakistan", "Pakistani"), ("Sri Lanka", "Sri Lankan"), ("Canada", "Canadian"),
    ("Mexico", "Mexican"), ("Turkey", "Turkish"), ("Greece", "Greek"),
    ("Ireland", "Irish"),
]

CITIES = [
    ("Paris", "France"), ("Lyon", "France"), ("Marseille", "France"),
    ("Berlin", "Germany"), ("Munich", "Germany"), ("Frankfurt", "Germany"),
    ("Rome", "Italy"), ("Milan", "Italy"), ("Turin", "Italy"),
    ("Madrid", "Spain"), ("Barcelona", "Spain"), ("Seville", "Spain"),
    ("Sao Paulo", "Brazil"), ("Rio de Janeiro", "Brazil"),
    ("Wellington", "New Zealand"), ("Auckland", "New Zealand"),
    ("Cape Town", "South Africa"), ("Johannesburg", "South Africa"),
    ("New York", "United States"), ("Los Angeles", "United States"),
    ("Chicago", "United States"), ("Washington", "United States"),
    ("Prague", "Czech Republic"), ("Tokyo", "Japan"), ("Osaka", "Japan"),
    ("Beijing", "China"), ("Shanghai", "China"), ("Moscow", "Russia"),
    ("London", "England"), ("Manchester", "England"), ("Sydney", "Australia"),
    ("Melbourne", "Australia"), ("Lisbon", "Portugal"), ("Porto", "Portugal"),
    ("Amsterdam", "Netherlands"), ("Rotterdam", "Netherlands"),
    ("Brussels", "Belgium"), ("Stockholm", "Sweden"), ("Oslo", "Norway"),
    ("Warsaw", "Poland"), ("Buenos Aires", "Argentina"), ("Cairo", "Egypt"),
    ("New Delhi", "India"), ("Bombay", "India"), ("Karachi", "Pakistan"),
    ("Colombo", "Sri Lanka"), ("Toronto", "Canada"), ("Mexico City", "Mexico"),
    ("Istanbul", "Turkey"), ("Athens", "Greece"), ("Dublin", "Ireland"),
]

LANDMARKS = [
    ("Eiffel tower", "France"), ("Louvre", "France"), ("Notre Dame", "France"),
    ("Brandenburg Gate", "Germany"), ("Cologne Cathedral", "Germany"),
    ("Colosseum", "Italy"), ("Leaning Tower of Pisa", "Italy"),
    ("Sagrada Familia", "Spain"), ("Alhambra", "Spain"),
    ("Christ the Redeemer", "Brazil"), ("Table Mountain", "South Africa"),
    ("Statue of Liberty", "United States"), ("Golden Gate Bridge", "United States"),
    ("Charles Bridge", "Czech Republic"), ("Mount Fuji", "Japan"),
    ("Great Wall", "China"), ("Forbidden City", "China"), ("Red Square", "Russia"),
    ("Kremlin", "Russia"), ("Big Ben", "England"), ("Tower Bridge", "England"),
    ("Sydney Opera House", "Australia"), ("Belem Tower", "Portugal"),
    ("Atomium", "Belgium"), ("Taj Mahal", "India"), ("Pyramids of Giza", "Egypt"),
    ("CN Tower", "Canada"), ("Hagia Sophia", "Turkey"), ("Parthenon", "Greece"),
    ("Acropolis", "Greece"), ("Niagara Falls", "Canada"), ("Sphinx", "Egypt"),
]

FIRST = [
    "Peter", "John", "Michael", "David", "Paul", "Mark", "Robert", "Thomas",
    "Carlo", "Marco", "Luis", "Juan", "Pierre", "Jean", "Hans", "Klaus",
    "Ahmed", "Wasim", "Sanath", "Arjuna", "Ivan", "Boris", "Jan", "Pavel",
    "Kenji", "Hiroshi", "Ole", "Lars", "Sven", "Piet", "Dirk", "Stefan",
    "Gaston", "Andre", "Ronaldo", "Diego", "Mario", "Greg", "Steve", "Brian",
    "Alain", "Yves", "Franz", "Jose", "Manuel", "Nelson", "Kevin", "Martin",
]
LAST = [
    "Smith", "Jones", "Brown", "Taylor", "Wilson", "Mancini", "Rossi", "Garcia",
    "Lopez", "Dupont", "Martin", "Muller", "Schmidt", "Huber", "Khan", "Akram",
    "Jayasuriya", "Ranatunga", "Ivanov", "Petrov", "Novak", "Svoboda", "Tanaka",
    "Suzuki", "Bjorndalen", "Larsen", "Johansson", "Van Hooydonk", "De Boer",
    "Julia", "Mandelbrot", "Mazzone", "Maradona", "Norman", "Waugh", "Mandela",
    "Prost", "Cornwell", "Becker", "Klinsmann", "Pinto", "Figo", "Fischer",
    "Weber", "Moreau", "Fontaine", "Costa", "Silva",
]

ORG_SUFFIX = ["United", "City", "Athletic", "Rovers", "Wanderers"]
COMPANIES = [
    "General Motors", "Deutsche Bank", "Air France", "Fiat", "Renault",
    "Siemens", "Sony", "Toyota", "British Airways", "Royal Dutch Shell",
    "Coca Cola", "Microsoft", "Nestle", "Volvo", "Philips", "Telefonica",
    "Reuters", "European Union", "United Nations", "World Bank",
    "International Monetary Fund", "Bundesbank", "Federal Reserve", "NATO",
    "Red Cross", "Olympic Committee", "Interior Ministry", "Finance Ministry",
]
EVENTS = ["World Cup", "Olympic Games", "Tour de France", "Davis Cup",
          "Grand Prix", "Super League", "Champions League", "Open"]

VERBS = ["said", "told", "announced", "reported", "added", "confirmed",
         "denied", "warned", "argued", "claimed"]
TOPICS = ["talks", "shares", "prices", "elections", "the match", "the deal",
          "the vote", "the strike", "the budget", "the summit", "the race"]
DAYS = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday",
        "Sunday"]


class World:
    def __init__(self, seed):
        rng = random.Random(seed)
        self.rng = rng
        names = set()
        persons = []
        while len(persons) < 220:
            first = rng.choice(FIRST)
            last = rng.choice(LAST)
            if (first, last) in names:
                continue
            names.add((first, last))
            country = rng.choice(COUNTRIES)[0]
            persons.append({"first": first, "last": last, "country": country})
        self.persons = persons
        clubs = []
        for city, country in CITIES:
            if rng.random() < 0.6:
                clubs.append((f"{city} {rng.choice(ORG_SUFFIX)}", country))
        self.clubs = clubs
        self.countries = COUNTRIES
        self.cities = CITIES
        self.landmarks = LANDMARKS
        # Zipf-like popularity so mention frequencies spread over decades.
        self.person_w = [1.0 / (i + 1) ** 0.9 for i in range(len(persons))]
        rng.shuffle(self.person_w)

    # --- entity pickers -------------------------------------------------
    def person(self):
        return self.rng.choices(self.persons, weights=self.person_w)[0]

    def per_mention(self, p, short_ok=True):
        if short_ok and self.rng.random() < 0.3:
            return [(p["last"], "PER")]
        return [(f"{p['first']} {p['last']}", "PER")]

    def loc(self):
        r = self.rng.random()
        if r < 0.45:
            return self.rng.choice(self.cities)[0]
        if r < 0.9:
            return self.rng.choice(self.countries)[0]
        return self.rng.choice(self.landmarks)[0]

    def org(self):
        if self.rng.random() < 0.5 and self.clubs:
            return self.rng.choice(self.clubs)[0]
        return self.rng.choice(COMPANIES)

    def misc(self):
        if self.rng.random() < 0.6:
            return self.rng.choice(self.countries)[1]
        return self.rng.choice(EVENTS)

    # --- sentences: list of (text chunk, tag or None) --------------------
    def sentence(self):
        rng = self.rng
        p = self.person()
        q = self.person()
        t = rng.randrange(12)
        S = []
        if t == 0:
            S = [*self.per_mention(p), (rng.choice(VERBS), None), ("on", None),
                 (rng.choice(DAYS), None), ("that", None), (self.org(), "ORG"),
                 ("would", None), ("resume", None), (rng.choice(TOPICS), None),
                 ("in", None), (self.loc(), "LOC"), (".", None)]
        elif t == 1:
            S = [(self.org(), "ORG"), ("beat", None), (self.org(), "ORG"),
                 (f"{rng.randrange(5)}-{rng.randrange(5)}", None), ("in", None),
                 ("the", None), (self.misc(), "MISC"), ("on", None),
                 (rng.choice(DAYS), None), (".", None)]
        elif t == 2:
            S = [(self.misc(), "MISC"), ("officials", None), ("met", None),
                 *self.per_mention(p), ("in", None), (self.loc(), "LOC"),
                 ("to", None), ("discuss", None), (rng.choice(TOPICS), None), (".", None)]
        elif t == 3:
            S = [(self.loc(), "LOC"), ("called", None), ("up", None),
                 (self.loc(), "LOC"), ("defender", None), *self.per_mention(p, False),
                 ("for", None), ("the", None), (self.misc(), "MISC"), (".", None)]
        elif t == 4:
            lm, _ = rng.choice(self.landmarks)
            S = [("Tourists", None), ("visiting", None), ("the", None), (lm, "LOC"),
                 ("in", None), (self.loc(), "LOC"), ("were", None), ("told", None),
                 ("by", None), *self.per_mention(p), ("to", None), ("wait", None), (".", None)]
        elif t == 5:
            S = [*self.per_mention(p), ("of", None), (p["country"], "LOC"),
                 ("won", None), ("the", None), (self.misc(), "MISC"), ("after", None),
                 ("beating", None), *self.per_mention(q), (".", None)]
        elif t == 6:
            S = [("Shares", None), ("in", None), (self.org(), "ORG"), ("rose", None),
                 (f"{rng.randrange(1, 9)}", None), ("percent", None), ("in", None),
                 (self.loc(), "LOC"), ("on", None), (rng.choice(DAYS), None), (".", None)]
        elif t == 7:
            S = [(self.org(), "ORG"), ("spokesman", None), *self.per_mention(p, False),
                 (rng.choice(VERBS), None), ("the", None), ("company", None),
                 ("would", None), ("expand", None), ("in", None), (self.loc(), "LOC"), (".", None)]
        elif t == 8:
            S = [("The", None), (self.misc(), "MISC"), ("team", None), ("arrived", None),
                 ("in", None), (self.loc(), "LOC"), ("on", None), (rng.choice(DAYS), None),
                 (".", None)]
        elif t == 9:
            S = [*self.per_mention(p), ("and", None), *self.per_mention(q),
                 ("meet", None), (",", None), ("the", None), ("latter", None),
                 ("tells", None), ("reporters", None), ("in", None), (self.loc(), "LOC"), (".", None)]
        elif t == 10:
            S = [("--", None), (self.loc(), "LOC"), ("newsroom", None), ("+44", None),
                 ("171", None), ("542", None), ("7658", None)]
        else:
            S = [(self.loc(), "LOC"), ("police", None), ("arrested", None),
                 ("a", None), (self.misc(), "MISC"), ("man", None), ("on", None),
                 (rng.choice(DAYS), None), (".", None)]
        return S

    def conll_sentence(self):
        rows = []
        for chunk, tag in self.sentence():
            words = chunk.split(" ")
            for i, w in enumerate(words):
                if tag is None:
                    rows.append((w, "NN", "I-NP", "O"))
                else:
                    prefix = "B" if i == 0 else "I"
                    rows.append((w, "NNP", "I-NP", f"{prefix}-{tag}"))
        return rows

    # --- pretraining documents -----------------------------------------
    def fact(self):
        rng = self.rng
        r = rng.randrange(8)
        if r == 0:
            lm, c = rng.choice(self.landmarks)
            return f"The {lm} is located in {c} ."
        if r == 1:
            city, c = rng.choice(self.cities)
            return f"{city} is a city in {c} ."
        if r == 2:
            p = self.person()
            return f"{p['first']} {p['last']} is a {dict(self.countries)[p['country']]} player ."
        if r == 3:
            c, adj = rng.choice(self.countries)
            return f"People from {c} are called {adj} ."
        if r == 4:
            club, c = rng.choice(self.clubs)
            return f"{club} is a club from {c} ."
        if r == 5:
            lm, c = rng.choice(self.landmarks)
            return f"Visitors to {c} often see the {lm} ."
        if r == 6:
            p = self.person()
            return f"{p['first']} {p['last']} , also known as {p['last']} , comes from {p['country']} ."
        city, c = rng.choice(self.cities)
        return f"The capital region around {city} belongs to {c} ."

    def recall(self):
        """Sentence followed by a restatement of one of its mentions."""
        s = self.sentence()
        text = detok([c for c, _ in s])
        ents = [c for c, t in s if t is not None]
        return f"{text} Entity : {ents[-1]} ."

    def restated(self):
        """Sentence where one mention is immediately repeated after `=`."""
        s = self.sentence()
        ents = [i for i, (_, t) in enumerate(s) if t is not None]
        k = self.rng.choice(ents)
        out = []
        for i, (c, _) in enumerate(s):
            out.append(c)
            if i == k:
                out += ["=", c]
        return detok(out)

    def glossary(self):
        s = self.sentence()
        ents = [c for c, t in s if t is not None]
        return " ".join(f"{e} = {e} ." for e in ents)

    def document(self):
        parts = []
        for _ in range(self.rng.randrange(2, 5)):
            r = self.rng.random()
            if r < 0.35:
                parts.append(detok([c for c, _ in self.sentence()]))
            elif r < 0.55:
                parts.append(self.fact())
            elif r < 0.7:
                parts.append(self.recall())
            elif r < 0.85:
                parts.append(self.restated())
            else:
                parts.append(self.glossary())
        return " ".join(parts)


def detok(chunks):
    return " ".join(chunks)


def write_conll(path, sentences):
    with open(path, "w") as f:
        f.write("-DOCSTART- -X- -X- O\n\n")
        for i, rows in enumerate(sentences):
            if i and i % 25 == 0:
                f.write("-DOCSTART- -X- -X- O\n\n")
            for r in rows:
                f.write(" ".join(r) + "\n")
            f.write("\n")


def mention_counts(corpus, mentions):
    counts = {}
    for m in mentions:
        pat = re.compile(r"(?<!\S)" + re.escape(m) + r"(?!\S)")
        counts[m] = sum(len(pat.findall(doc)) for doc in corpus)
    return counts


def relation_dataset(world):
    pairs = [{"subject": lm, "object": c} for lm, c in world.landmarks]
    return {
        "relation_id": "landmark_in_country",
        "template": "The {} is located in",
        "object_template": "{} .",
        "pairs": pairs,
    }
