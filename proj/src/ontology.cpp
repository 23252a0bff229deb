#include "pretext/ontology.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pretext/errors.hpp"

namespace pretext {

using nlohmann::json;

const std::vector<std::string>& required_category_names() {
    static const std::vector<std::string> names = {
        "age", "gender", "upper_clothes", "lower_clothes", "action", "hair_length"};
    return names;
}

const std::vector<std::string>& optional_category_names() {
    static const std::vector<std::string> names = {
        "bag", "glasses", "smoke", "hat", "cellphone", "umbrella", "gloves", "vehicle"};
    return names;
}

namespace {

void validate_category(const AttributeCategory& cat) {
    if (cat.phrases.empty())
        throw ValidationError("category '" + cat.name + "' has no phrases");
    std::set<std::string> surfaces;
    for (const auto& p : cat.phrases) {
        if (p.surface.empty())
            throw ValidationError("category '" + cat.name + "' contains an empty phrase surface");
        if (!surfaces.insert(p.surface).second)
            throw ValidationError("duplicate phrase surface '" + p.surface + "' in category '" +
                                  cat.name + "'");
        std::set<std::string> syns;
        for (const auto& s : p.synonyms) {
            if (s == p.surface)
                throw ValidationError("phrase '" + p.surface + "' in category '" + cat.name +
                                      "' lists itself as a synonym");
            if (!syns.insert(s).second)
                throw ValidationError("duplicate synonym '" + s + "' for phrase '" + p.surface +
                                      "' in category '" + cat.name + "'");
        }
    }
}

void validate(const std::vector<AttributeCategory>& categories) {
    std::set<std::string> names;
    for (const auto& c : categories) {
        if (!names.insert(c.name).second)
            throw ValidationError("duplicate category name '" + c.name + "'");
        validate_category(c);
    }
    for (const auto& want : required_category_names()) {
        auto it = std::find_if(categories.begin(), categories.end(), [&](const auto& c) {
            return c.name == want && c.kind == CategoryKind::required;
        });
        if (it == categories.end())
            throw ValidationError("missing required category: " + want);
    }
    for (const auto& want : optional_category_names()) {
        auto it = std::find_if(categories.begin(), categories.end(), [&](const auto& c) {
            return c.name == want && c.kind == CategoryKind::optional;
        });
        if (it == categories.end())
            throw ValidationError("missing optional category: " + want);
    }
    size_t expected = required_category_names().size() + optional_category_names().size();
    if (categories.size() != expected)
        throw ValidationError("ontology must contain exactly " + std::to_string(expected) +
                              " categories, got " + std::to_string(categories.size()));
}

std::vector<AttributeCategory> parse_section(const json& arr, CategoryKind kind,
                                             const char* section) {
    if (!arr.is_array()) throw ParseError(std::string("ontology: '") + section + "' must be an array");
    std::vector<AttributeCategory> out;
    for (const auto& item : arr) {
        AttributeCategory cat;
        cat.kind = kind;
        if (!item.contains("name") || !item["name"].is_string())
            throw ParseError(std::string("ontology: category in '") + section +
                             "' is missing a string 'name'");
        cat.name = item["name"].get<std::string>();
        if (!item.contains("phrases") || !item["phrases"].is_array())
            throw ParseError("ontology: category '" + cat.name + "' is missing a 'phrases' array");
        for (const auto& ph : item["phrases"]) {
            AttributePhrase phrase;
            if (ph.is_string()) {
                phrase.surface = ph.get<std::string>();
            } else if (ph.is_object()) {
                if (!ph.contains("surface") || !ph["surface"].is_string())
                    throw ParseError("ontology: phrase in category '" + cat.name +
                                     "' is missing a string 'surface'");
                phrase.surface = ph["surface"].get<std::string>();
                if (ph.contains("synonyms")) {
                    if (!ph["synonyms"].is_array())
                        throw ParseError("ontology: synonyms of '" + phrase.surface +
                                         "' must be an array");
                    for (const auto& s : ph["synonyms"]) {
                        if (!s.is_string())
                            throw ParseError("ontology: synonym of '" + phrase.surface +
                                             "' must be a string");
                        phrase.synonyms.push_back(s.get<std::string>());
                    }
                }
            } else {
                throw ParseError("ontology: phrase entries must be strings or objects");
            }
            cat.phrases.push_back(std::move(phrase));
        }
        out.push_back(std::move(cat));
    }
    return out;
}

}  // namespace

AttributeOntology AttributeOntology::from_categories(std::vector<AttributeCategory> categories) {
    validate(categories);
    AttributeOntology o;
    o.categories_ = std::move(categories);
    return o;
}

const AttributeCategory& AttributeOntology::category(const std::string& name) const {
    for (const auto& c : categories_)
        if (c.name == name) return c;
    throw ContractError("unknown category '" + name + "'");
}

bool AttributeOntology::has_category(const std::string& name) const {
    return std::any_of(categories_.begin(), categories_.end(),
                       [&](const auto& c) { return c.name == name; });
}

std::vector<const AttributeCategory*> AttributeOntology::required() const {
    std::vector<const AttributeCategory*> out;
    for (const auto& name : required_category_names()) out.push_back(&category(name));
    return out;
}

std::vector<const AttributeCategory*> AttributeOntology::optionals() const {
    std::vector<const AttributeCategory*> out;
    for (const auto& name : optional_category_names()) out.push_back(&category(name));
    return out;
}

std::vector<PromptText> AttributeOntology::all_prompts() const {
    std::vector<PromptText> out;
    for (const auto& c : categories_) {
        for (const auto& p : c.phrases) out.push_back(to_prompt(c, p));
        if (c.kind == CategoryKind::optional) out.push_back(to_prompt(c, c.null_phrase()));
    }
    return out;
}

AttributeOntology parse_ontology(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("ontology: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("required") || !doc.contains("optional"))
        throw ParseError("ontology: document must have top-level 'required' and 'optional' keys");
    auto categories = parse_section(doc["required"], CategoryKind::required, "required");
    auto opt = parse_section(doc["optional"], CategoryKind::optional, "optional");
    categories.insert(categories.end(), opt.begin(), opt.end());
    return AttributeOntology::from_categories(std::move(categories));
}

AttributeOntology load_ontology(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("ontology: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_ontology(buf.str());
}

std::string serialize_ontology(const AttributeOntology& ontology) {
    json doc;
    doc["required"] = json::array();
    doc["optional"] = json::array();
    for (const auto& c : ontology.categories()) {
        json cat;
        cat["name"] = c.name;
        cat["phrases"] = json::array();
        for (const auto& p : c.phrases) {
            json ph;
            ph["surface"] = p.surface;
            ph["synonyms"] = p.synonyms;
            cat["phrases"].push_back(ph);
        }
        doc[c.kind == CategoryKind::required ? "required" : "optional"].push_back(cat);
    }
    return doc.dump(2) + "\n";
}

void save_ontology(const AttributeOntology& ontology, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("ontology: cannot write '" + path + "'");
    out << serialize_ontology(ontology);
}

PromptText to_prompt(const AttributeCategory& category, const AttributePhrase& phrase) {
    bool known = std::any_of(category.phrases.begin(), category.phrases.end(),
                             [&](const auto& p) { return p.surface == phrase.surface; }) ||
                 (category.kind == CategoryKind::optional &&
                  phrase.surface == category.null_phrase().surface);
    if (!known)
        throw ContractError("phrase '" + phrase.surface + "' does not belong to category '" +
                            category.name + "'");
    const std::string& n = category.name;
    if (n == "age" || n == "gender") return {"A photo of a " + phrase.surface};
    if (n == "upper_clothes" || n == "lower_clothes")
        return {"A photo of a person wearing " + phrase.surface};
    if (n == "action") return {"A photo of a person " + phrase.surface};
    // hair_length and every optional category
    return {"A photo of a person with " + phrase.surface};
}

}  // namespace pretext
