#pragma once

#include <optional>

#include "malaria/types.hpp"

namespace malaria {

/// Result of mapping a raw category onto the infection/stage taxonomies.
/// `excluded` marks annotations dropped from training and evaluation
/// (the dataset's `difficult` tag); such annotations carry no labels.
struct TaxonomyLabel {
    InfectionLabel infection{InfectionLabel::uninfected};
    std::optional<StageLabel> stage;
    bool excluded{false};

    friend bool operator==(const TaxonomyLabel&, const TaxonomyLabel&) = default;
};

TaxonomyLabel map_taxonomy(CellCategory category);

/// String entry point; unknown categories raise ValidationError.
TaxonomyLabel map_taxonomy(std::string_view category);

} // namespace malaria
