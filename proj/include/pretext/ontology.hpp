#pragma once
#include <optional>
#include <string>
#include <vector>

namespace pretext {

enum class CategoryKind { required, optional };

struct AttributePhrase {
    std::string surface;
    std::vector<std::string> synonyms;
};

struct AttributeCategory {
    std::string name;
    CategoryKind kind = CategoryKind::required;
    std::vector<AttributePhrase> phrases;  // order matters: argmax ties break low-index

    // Fixed absence alternative for optional categories ("no bag", "no hat", ...).
    // Competes in the optional-selection softmax but is never emitted as a fill.
    AttributePhrase null_phrase() const { return {"no " + name, {}}; }
};

struct PromptText {
    std::string text;
};

// Immutable after load; safe for concurrent reads.
class AttributeOntology {
public:
    static AttributeOntology from_categories(std::vector<AttributeCategory> categories);

    const std::vector<AttributeCategory>& categories() const { return categories_; }
    const AttributeCategory& category(const std::string& name) const;
    bool has_category(const std::string& name) const;

    std::vector<const AttributeCategory*> required() const;
    std::vector<const AttributeCategory*> optionals() const;

    // All prompts for every category/phrase pair, null phrases included.
    std::vector<PromptText> all_prompts() const;

private:
    std::vector<AttributeCategory> categories_;
};

// The canonical category names. Selection and reporting iterate in this order.
const std::vector<std::string>& required_category_names();
const std::vector<std::string>& optional_category_names();

AttributeOntology load_ontology(const std::string& path);
AttributeOntology parse_ontology(const std::string& json_text);
std::string serialize_ontology(const AttributeOntology& ontology);
void save_ontology(const AttributeOntology& ontology, const std::string& path);

// Prompt pattern per category:
//   age, gender            -> "A photo of a {phrase}"
//   upper/lower_clothes    -> "A photo of a person wearing {phrase}"
//   action                 -> "A photo of a person {phrase}"
//   hair_length + optional -> "A photo of a person with {phrase}"
PromptText to_prompt(const AttributeCategory& category, const AttributePhrase& phrase);

}  // namespace pretext
