#pragma once

#include <map>
#include <string>

#include "e3va/autodiff.hpp"
#include "e3va/config.hpp"

namespace e3va {

enum class Role {
    Weight,
    Bias,
    NormWeight,
    NormBias,
    RelBias,   // relative position bias table
    Scale,     // adaptformer scalar
    FpnNormWeight,
    FpnNormBias,
};

inline bool is_bias_role(Role r) {
    return r == Role::Bias || r == Role::NormBias || r == Role::RelBias;
}

inline bool is_norm_role(Role r) { return r == Role::NormWeight || r == Role::NormBias; }

inline bool is_fpn_norm_role(Role r) {
    return r == Role::FpnNormWeight || r == Role::FpnNormBias;
}

struct GroupCounts {
    int64_t phi_f = 0;  // frozen
    int64_t phi_a = 0;  // trainable inside the backbone (original or inserted)
    int64_t phi_o = 0;  // trainable outside the backbone
    int64_t trainable() const { return phi_a + phi_o; }
    int64_t total() const { return phi_f + phi_a + phi_o; }
    friend bool operator==(const GroupCounts& a, const GroupCounts& b) {
        return a.phi_f == b.phi_f && a.phi_a == b.phi_a && a.phi_o == b.phi_o;
    }
};

struct TagCounts {
    int64_t backbone = 0, adapter = 0, neck = 0, head = 0;
    friend bool operator==(const TagCounts& a, const TagCounts& b) {
        return a.backbone == b.backbone && a.adapter == b.adapter && a.neck == b.neck &&
               a.head == b.head;
    }
};

// Named parameter store. Values persist across training steps; each step the
// model re-registers them as tape leaves.
template <class Real>
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Shape shape;
        Tag tag;
        Role role;
        int stage = -1;  // 0-based, -1 when not block-owned
        int block = -1;
        bool trainable = false;
        std::vector<Real> value;
        Tensor leaf;  // id on the current tape
    };

    int add(const std::string& name, Shape shape, Tag tag, Role role, int stage = -1,
            int block = -1) {
        if (index_.count(name)) throw Error("registry: duplicate parameter " + name);
        Entry e;
        e.name = name;
        e.shape = std::move(shape);
        e.tag = tag;
        e.role = role;
        e.stage = stage;
        e.block = block;
        e.value.assign(numel(e.shape), Real(0));
        index_[name] = int(entries_.size());
        entries_.push_back(std::move(e));
        return int(entries_.size()) - 1;
    }

    Entry& operator[](int i) { return entries_[i]; }
    const Entry& operator[](int i) const { return entries_[i]; }
    Entry& at(const std::string& name) { return entries_[index_.at(name)]; }
    const Entry& at(const std::string& name) const { return entries_[index_.at(name)]; }
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int size() const { return int(entries_.size()); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    // Registers every entry as a leaf on the tape, under its owner tag.
    void bind(Tape<Real>& tape) {
        for (Entry& e : entries_) {
            typename Tape<Real>::TagScope scope(tape, e.tag);
            e.leaf = tape.param(e.shape, e.value, e.trainable);
        }
    }

    GroupCounts group_counts() const {
        GroupCounts g;
        for (const Entry& e : entries_) {
            int64_t n = numel(e.shape);
            if (!e.trainable)
                g.phi_f += n;
            else if (e.tag == Tag::Backbone || e.tag == Tag::Adapter)
                g.phi_a += n;
            else
                g.phi_o += n;
        }
        return g;
    }

    TagCounts tag_counts(bool trainable_only) const {
        TagCounts t;
        for (const Entry& e : entries_) {
            if (trainable_only && !e.trainable) continue;
            int64_t n = numel(e.shape);
            switch (e.tag) {
                case Tag::Backbone: t.backbone += n; break;
                case Tag::Adapter: t.adapter += n; break;
                case Tag::Neck: t.neck += n; break;
                case Tag::Head: t.head += n; break;
            }
        }
        return t;
    }

    int64_t trainable_count() const { return group_counts().trainable(); }
    int64_t total_count() const { return group_counts().total(); }

    // The tables' "trained*" convention: in-backbone trainable plus inserted
    // structures plus trainable pre-FPN norms; neck laterals and the head are
    // excluded (every method trains those).
    int64_t table_trainable_count() const {
        int64_t n = 0;
        for (const Entry& e : entries_) {
            if (!e.trainable) continue;
            if (e.tag == Tag::Backbone || e.tag == Tag::Adapter || is_fpn_norm_role(e.role))
                n += numel(e.shape);
        }
        return n;
    }

    uint64_t checksum(bool frozen_only) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const Entry& e : entries_) {
            if (frozen_only && e.trainable) continue;
            h = fnv1a(e.name.data(), e.name.size(), h);
            h = fnv1a(e.value.data(), e.value.size() * sizeof(Real), h);
        }
        return h;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

// Sets trainable flags for a fully populated registry.
template <class Real>
void apply_tuning_policy(ParamRegistry<Real>& reg, const BackboneConfig& cfg,
                         const MethodConfig& m) {
    m.validate();
    int last_stage = cfg.n_stages() - 1;
    int last_block = cfg.depths[last_stage] - 1;
    for (auto& e : reg) {
        switch (e.tag) {
            case Tag::Backbone:
                switch (m.name) {
                    case Method::Full: e.trainable = true; break;
                    case Method::BitFit: e.trainable = is_bias_role(e.role); break;
                    case Method::Norm: e.trainable = is_norm_role(e.role); break;
                    case Method::Partial1:
                        e.trainable = e.stage == last_stage && e.block == last_block;
                        break;
                    default: e.trainable = false; break;
                }
                break;
            case Tag::Adapter:
                e.trainable = true;
                break;
            case Tag::Neck:
            case Tag::Head:
                e.trainable = is_fpn_norm_role(e.role)
                                  ? (m.fpn_norm_trainable() || m.name == Method::Full)
                                  : true;
                break;
        }
    }
}

}  // namespace e3va
