#pragma once

// Multiple-choice QA records: line-delimited JSON I/O, input/target
// rendering, and the synthetic science fixture used for desk-scale runs.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptblend/error.hpp"
#include "promptblend/rng.hpp"

namespace promptblend {

struct Choice {
  std::string label;
  std::string text;

  bool operator==(const Choice&) const = default;
};

struct QAExample {
  std::string id;
  std::string question;
  std::vector<Choice> choices;
  std::string answer_key;

  bool operator==(const QAExample&) const = default;

  const Choice& answer() const {
    for (const auto& c : choices) {
      if (c.label == answer_key) {
        return c;
      }
    }
    throw ValidationError("example " + id + ": answer key " + answer_key + " not among choices");
  }
};

/// Throws ValidationError unless the example has 3-5 choices with unique,
/// ascending labels drawn from A-E and an answer key among them.
inline void validate_example(const QAExample& ex) {
  if (ex.choices.size() < 3 || ex.choices.size() > 5) {
    throw ValidationError("example " + ex.id + ": expected 3-5 choices, got " +
                          std::to_string(ex.choices.size()));
  }
  std::set<std::string> seen;
  std::string previous;
  for (const auto& c : ex.choices) {
    if (c.label.size() != 1 || c.label[0] < 'A' || c.label[0] > 'E') {
      throw ValidationError("example " + ex.id + ": choice label '" + c.label +
                            "' is not one of A-E");
    }
    if (!seen.insert(c.label).second) {
      throw ValidationError("example " + ex.id + ": duplicate choice label " + c.label);
    }
    if (!previous.empty() && c.label < previous) {
      throw ValidationError("example " + ex.id + ": choice labels out of order");
    }
    previous = c.label;
  }
  if (ex.answer_key.empty()) {
    throw ValidationError("example " + ex.id + ": missing answer key");
  }
  if (!seen.contains(ex.answer_key)) {
    throw ValidationError("example " + ex.id + ": answer key " + ex.answer_key +
                          " is not a choice label");
  }
}

inline QAExample parse_example(std::string_view line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line_no, std::string("malformed record: ") + e.what());
  }
  auto field = [&](const nlohmann::json& obj, const char* key) -> std::string {
    if (!obj.is_object() || !obj.contains(key)) {
      throw ParseError(line_no, std::string("missing field '") + key + "'");
    }
    if (!obj.at(key).is_string()) {
      throw ParseError(line_no, std::string("field '") + key + "' must be a string");
    }
    return obj.at(key).get<std::string>();
  };
  QAExample ex;
  ex.id = field(j, "id");
  ex.question = field(j, "question");
  if (!j.contains("choices") || !j.at("choices").is_array()) {
    throw ParseError(line_no, "missing array field 'choices'");
  }
  for (const auto& c : j.at("choices")) {
    ex.choices.push_back({field(c, "label"), field(c, "text")});
  }
  if (!j.contains("answerKey")) {
    throw ParseError(line_no, "missing answer key");
  }
  ex.answer_key = field(j, "answerKey");
  try {
    validate_example(ex);
  } catch (const ValidationError& e) {
    throw ParseError(line_no, e.what());
  }
  return ex;
}

inline std::string serialize_example(const QAExample& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["question"] = ex.question;
  j["choices"] = nlohmann::ordered_json::array();
  for (const auto& c : ex.choices) {
    nlohmann::ordered_json cj;
    cj["label"] = c.label;
    cj["text"] = c.text;
    j["choices"].push_back(std::move(cj));
  }
  j["answerKey"] = ex.answer_key;
  return j.dump();
}

inline std::vector<QAExample> parse_dataset(std::istream& in) {
  std::vector<QAExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    out.push_back(parse_example(line, line_no));
  }
  return out;
}

inline std::vector<QAExample> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open dataset file " + path);
  }
  return parse_dataset(in);
}

inline void save_dataset(const std::string& path, const std::vector<QAExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write dataset file " + path);
  }
  for (const auto& ex : examples) {
    out << serialize_example(ex) << '\n';
  }
}

/// "{question} Options: A: text - B: text ..."
inline std::string format_input(const QAExample& ex) {
  std::string out = ex.question + " Options:";
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    out += (i == 0 ? " " : " - ");
    out += ex.choices[i].label + ": " + ex.choices[i].text;
  }
  return out;
}

inline std::string format_choice(const Choice& c) { return c.label + ": " + c.text; }

/// "{answer_key}: {answer text}"
inline std::string format_target(const QAExample& ex) { return format_choice(ex.answer()); }

namespace fixture_detail {

struct Family {
  // Question template with "{e}" replaced by an entity of the chosen fact.
  std::string question;
  struct Fact {
    std::string answer;
    std::vector<std::string> entities;
  };
  std::vector<Fact> facts;
  // Extra wrong answers that are never correct; used alongside other facts.
  std::vector<std::string> decoys;
};

inline std::string fill(std::string tmpl, const std::string& entity) {
  const auto pos = tmpl.find("{e}");
  if (pos != std::string::npos) {
    tmpl.replace(pos, 3, entity);
  }
  return tmpl;
}

inline const std::vector<Family>& families() {
  static const std::vector<Family> kFamilies = {
      {"Scientists group animals based on physical features. {e} are classified together because "
       "of what physical feature?",
       {{"they have gills", {"Trout", "Salmon", "Sharks", "Tuna", "Goldfish"}},
        {"they have feathers", {"Robins", "Eagles", "Owls", "Penguins", "Parrots"}},
        {"they have fur", {"Bears", "Rabbits", "Foxes", "Mice", "Squirrels"}},
        {"they have dry scales", {"Snakes", "Lizards", "Turtles", "Iguanas", "Geckos"}},
        {"they have six legs", {"Ants", "Beetles", "Bees", "Grasshoppers", "Flies"}},
        {"they have moist skin", {"Frogs", "Toads", "Newts", "Salamanders"}}},
       {}},
      {"A student turns on a {e}. Which energy transformation takes place?",
       {{"electrical energy → light energy", {"lamp", "flashlight", "lantern", "light bulb"}},
        {"electrical energy → thermal energy", {"toaster", "space heater", "hot plate", "kettle"}},
        {"electrical energy → mechanical energy", {"fan", "blender", "drill", "mixer"}},
        {"electrical energy → sound energy", {"speaker", "doorbell", "buzzer", "radio"}}},
       {"chemical energy → electrical energy", "light energy → chemical energy"}},
      {"Which tool is best for measuring the {e}?",
       {{"a thermometer", {"temperature of a pond", "temperature of soup", "warmth of sand"}},
        {"a ruler", {"length of a leaf", "width of a book", "height of a seedling"}},
        {"a balance", {"mass of a rock", "mass of an apple", "mass of a coin"}},
        {"a graduated cylinder", {"volume of juice", "volume of rainwater", "volume of oil"}},
        {"a stopwatch", {"time of a race", "duration of a swing", "time to boil water"}},
        {"a spring scale", {"force to pull a wagon", "force to lift a bag"}}},
       {}},
      {"A scientist {e}. Which change is most likely observed?",
       {{"the solid melts", {"warms a block of ice", "heats a bar of wax", "heats solid butter"}},
        {"the liquid freezes", {"chills a cup of water in a freezer", "cools liquid wax slowly"}},
        {"the liquid evaporates", {"boils a pot of water", "leaves a puddle in the hot sun"}},
        {"the gas condenses", {"cools steam on a cold plate", "chills water vapor in a jar"}}},
       {"the solid dissolves", "the gas ignites"}},
      {"Which adaptation best helps a {e}?",
       {{"storing water in its body", {"camel survive in the desert", "cactus survive a drought"}},
        {"thick fur and a layer of fat", {"polar bear survive the arctic", "seal survive icy water"}},
        {"webbed feet for swimming", {"duck move through a pond", "otter chase fish in a river"}},
        {"sharp claws for climbing", {"squirrel escape up a tree", "koala grip tall trees"}},
        {"colors that blend with leaves", {"moth hide from birds", "katydid avoid predators"}}},
       {}},
      {"Which would most likely need to happen for a new {e} to grow?",
       {{"a seed sprouts into a seedling", {"plant", "bean plant", "sunflower", "oak tree", "tomato plant"}}},
       {"leaves grow out of a stem", "insects get attracted to the petals",
        "a blossom falls into the soil", "roots absorb salt water"}},
      {"Which body in the solar system {e}?",
       {{"the sun", {"gives off its own light", "holds the planets in orbit"}},
        {"the moon", {"orbits the earth", "shows phases each month"}},
        {"mars", {"is called the red planet", "has two small moons"}},
        {"jupiter", {"is the largest planet", "has a great red spot"}}},
       {"a comet"}},
  };
  return kFamilies;
}

}  // namespace fixture_detail

/// Deterministic synthetic science QA set: 4 choices per example, answer
/// position uniform over A-D, rendered inputs pairwise distinct.
inline std::vector<QAExample> make_fixture(std::uint64_t seed, std::size_t n) {
  if (n == 0) {
    throw ValidationError("fixture size must be >= 1");
  }
  const auto& fams = fixture_detail::families();
  Rng rng(seed ^ 0xF1C7u);
  std::vector<QAExample> out;
  std::unordered_set<std::string> rendered;
  const char* labels[] = {"A", "B", "C", "D"};
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > n * 1000) {
      throw Error("fixture generator exhausted its distinct examples");
    }
    const auto& fam = fams[rng.below(fams.size())];
    const std::size_t fact_idx = rng.below(fam.facts.size());
    const auto& fact = fam.facts[fact_idx];
    const auto& entity = fact.entities[rng.below(fact.entities.size())];

    std::vector<std::string> wrong;
    for (std::size_t i = 0; i < fam.facts.size(); ++i) {
      if (i != fact_idx) {
        wrong.push_back(fam.facts[i].answer);
      }
    }
    wrong.insert(wrong.end(), fam.decoys.begin(), fam.decoys.end());
    rng.shuffle(std::span<std::string>(wrong));
    wrong.resize(3);

    const std::size_t answer_pos = rng.below(4);
    QAExample ex;
    ex.question = fixture_detail::fill(fam.question, entity);
    std::size_t w = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      ex.choices.push_back({labels[i], i == answer_pos ? fact.answer : wrong[w++]});
    }
    ex.answer_key = labels[answer_pos];
    if (!rendered.insert(format_input(ex)).second) {
      continue;
    }
    std::ostringstream id;
    id << "fx" << seed << "-" << out.size();
    ex.id = id.str();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace promptblend
