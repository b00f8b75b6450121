#include "msclr/conventions.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "msclr/errors.hpp"

namespace msclr {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::pair<int, int> parse_pair(const std::string& tok, const char* what) {
    const auto dash = tok.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 >= tok.size())
        throw topology_error(std::string("malformed ") + what + " token: " + tok);
    try {
        return {std::stoi(tok.substr(0, dash)), std::stoi(tok.substr(dash + 1))};
    } catch (const std::exception&) {
        throw topology_error(std::string("malformed ") + what + " token: " + tok);
    }
}

}  // namespace

int SkeletonConvention::joint_index(std::string_view joint_name) const {
    for (std::size_t i = 0; i < joint_names.size(); ++i)
        if (joint_names[i] == joint_name) return static_cast<int>(i);
    throw topology_error("unknown joint name '" + std::string(joint_name) + "' in " + name);
}

void SkeletonConvention::validate() const {
    if (name.empty()) throw topology_error("convention has empty name");
    if (joint_count <= 0) throw topology_error(name + ": joint_count must be positive");
    if (center_joint < 0 || center_joint >= joint_count)
        throw topology_error(name + ": center_joint out of range");
    if (static_cast<int>(joint_names.size()) != joint_count)
        throw topology_error(name + ": joint_names size does not match joint_count");
    if (static_cast<int>(swap_map.size()) != joint_count)
        throw topology_error(name + ": swap_map size does not match joint_count");

    std::set<std::pair<int, int>> seen;
    for (auto [a, b] : edges) {
        if (a < 0 || a >= joint_count || b < 0 || b >= joint_count)
            throw topology_error(name + ": edge endpoint out of range");
        if (a == b) throw topology_error(name + ": self-loop edge");
        const auto key = std::minmax(a, b);
        if (!seen.insert({key.first, key.second}).second)
            throw topology_error(name + ": duplicate edge");
    }

    for (int i = 0; i < joint_count; ++i) {
        const int j = swap_map[i];
        if (j < 0 || j >= joint_count)
            throw topology_error(name + ": swap_map entry out of range");
        if (swap_map[j] != i)
            throw topology_error(name + ": swap_map is not an involution");
    }

    // connectivity via BFS from joint 0
    std::vector<std::vector<int>> adj(joint_count);
    for (auto [a, b] : edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::vector<char> visited(joint_count, 0);
    std::queue<int> q;
    q.push(0);
    visited[0] = 1;
    int reached = 1;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int v : adj[u])
            if (!visited[v]) {
                visited[v] = 1;
                ++reached;
                q.push(v);
            }
    }
    if (reached != joint_count) throw topology_error(name + ": edge graph is disconnected");
}

SkeletonConvention parse_convention(const std::string& text) {
    SkeletonConvention conv;
    std::istringstream is(text);
    std::string line;
    std::vector<std::pair<int, int>> swap_pairs;
    bool have_count = false;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw topology_error("topology line missing '=': " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "name") {
            conv.name = value;
        } else if (key == "joint_count") {
            conv.joint_count = std::stoi(value);
            have_count = true;
        } else if (key == "center_joint") {
            conv.center_joint = std::stoi(value);
        } else if (key == "joint_names") {
            conv.joint_names = split_tokens(value);
        } else if (key == "edges") {
            for (const auto& tok : split_tokens(value))
                conv.edges.push_back(parse_pair(tok, "edge"));
        } else if (key == "swap_map") {
            for (const auto& tok : split_tokens(value))
                swap_pairs.push_back(parse_pair(tok, "swap"));
        } else {
            throw topology_error("unknown topology key: " + key);
        }
    }
    if (!have_count) throw topology_error("topology document missing joint_count");
    // unlisted joints are their own mirror
    conv.swap_map.resize(conv.joint_count);
    for (int i = 0; i < conv.joint_count; ++i) conv.swap_map[i] = i;
    for (auto [a, b] : swap_pairs) {
        if (a < 0 || a >= conv.joint_count || b < 0 || b >= conv.joint_count)
            throw topology_error(conv.name + ": swap pair out of range");
        conv.swap_map[a] = b;
        conv.swap_map[b] = a;
    }
    conv.validate();
    return conv;
}

SkeletonConvention load_convention(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open topology file: " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_convention(buf.str());
}

std::string format_convention(const SkeletonConvention& conv) {
    std::ostringstream os;
    os << "name = " << conv.name << "\n";
    os << "joint_count = " << conv.joint_count << "\n";
    os << "center_joint = " << conv.center_joint << "\n";
    os << "joint_names =";
    for (const auto& n : conv.joint_names) os << " " << n;
    os << "\n";
    os << "edges =";
    for (auto [a, b] : conv.edges) os << " " << a << "-" << b;
    os << "\n";
    os << "swap_map =";
    for (int i = 0; i < conv.joint_count; ++i)
        if (conv.swap_map[i] > i) os << " " << i << "-" << conv.swap_map[i];
    os << "\n";
    return os.str();
}

void ConventionRegistry::add(SkeletonConvention conv) {
    conv.validate();
    if (contains(conv.name)) throw topology_error("convention already registered: " + conv.name);
    v_max_ = std::max(v_max_, conv.joint_count);
    conventions_.push_back(std::move(conv));
}

bool ConventionRegistry::contains(std::string_view name) const {
    for (const auto& c : conventions_)
        if (c.name == name) return true;
    return false;
}

const SkeletonConvention& ConventionRegistry::get(std::string_view name) const {
    for (const auto& c : conventions_)
        if (c.name == name) return c;
    throw topology_error("unknown convention: " + std::string(name));
}

namespace {

// Shipped topology documents. The conventions/ data directory carries the same
// text; a test keeps the two in sync. SMPL and Kinectv2 follow the public
// kinematic trees. The 42-joint smplx variant keeps the 22 SMPL-X body joints
// and adds two eye joints plus three-joint thumb/index/middle chains per hand.
// The 43-joint mhad layout is a documented approximation of the Berkeley MHAD
// marker set: spine/head/torso markers plus 7-marker limb chains.

const char* kSmplTopology = R"(# smpl, 24 joints, standard kinematic tree
name = smpl
joint_count = 24
center_joint = 0
joint_names = pelvis l_hip r_hip spine1 l_knee r_knee spine2 l_ankle r_ankle spine3 l_foot r_foot neck l_collar r_collar head l_shoulder r_shoulder l_elbow r_elbow l_wrist r_wrist l_hand r_hand
edges = 0-1 0-2 0-3 1-4 2-5 3-6 4-7 5-8 6-9 7-10 8-11 9-12 9-13 9-14 12-15 13-16 14-17 16-18 17-19 18-20 19-21 20-22 21-23
swap_map = 1-2 4-5 7-8 10-11 13-14 16-17 18-19 20-21 22-23
)";

const char* kSmplxTopology = R"(# smplx, 42-joint variant: 22 body joints, 2 eyes,
# and thumb/index/middle finger chains (3 joints each) per hand
name = smplx
joint_count = 42
center_joint = 0
joint_names = pelvis l_hip r_hip spine1 l_knee r_knee spine2 l_ankle r_ankle spine3 l_foot r_foot neck l_collar r_collar head l_shoulder r_shoulder l_elbow r_elbow l_wrist r_wrist l_eye r_eye l_thumb1 l_thumb2 l_thumb3 l_index1 l_index2 l_index3 l_middle1 l_middle2 l_middle3 r_thumb1 r_thumb2 r_thumb3 r_index1 r_index2 r_index3 r_middle1 r_middle2 r_middle3
edges = 0-1 0-2 0-3 1-4 2-5 3-6 4-7 5-8 6-9 7-10 8-11 9-12 9-13 9-14 12-15 13-16 14-17 16-18 17-19 18-20 19-21 15-22 15-23 20-24 24-25 25-26 20-27 27-28 28-29 20-30 30-31 31-32 21-33 33-34 34-35 21-36 36-37 37-38 21-39 39-40 40-41
swap_map = 1-2 4-5 7-8 10-11 13-14 16-17 18-19 20-21 22-23 24-33 25-34 26-35 27-36 28-37 29-38 30-39 31-40 32-41
)";

const char* kMhadTopology = R"(# mhad, 43-marker layout: spine chain, 4 head markers,
# chest/back/waist/clavicle torso markers, 7-marker arm and leg chains
name = mhad
joint_count = 43
center_joint = 0
joint_names = pelvis spine_lower spine_mid spine_upper neck head_base head_top l_head r_head chest back l_shoulder l_upperarm l_elbow l_forearm l_wrist l_hand l_handtip r_shoulder r_upperarm r_elbow r_forearm r_wrist r_hand r_handtip l_hip l_thigh l_knee l_shin l_ankle l_heel l_toe r_hip r_thigh r_knee r_shin r_ankle r_heel r_toe l_waist r_waist l_clavicle r_clavicle
edges = 0-1 1-2 2-3 3-4 4-5 5-6 5-7 5-8 3-9 3-10 3-41 3-42 41-11 11-12 12-13 13-14 14-15 15-16 16-17 42-18 18-19 19-20 20-21 21-22 22-23 23-24 0-25 25-26 26-27 27-28 28-29 29-30 30-31 0-32 32-33 33-34 34-35 35-36 36-37 37-38 0-39 0-40
swap_map = 7-8 11-18 12-19 13-20 14-21 15-22 16-23 17-24 25-32 26-33 27-34 28-35 29-36 30-37 31-38 39-40 41-42
)";

const char* kKinectv2Topology = R"(# kinectv2, 25 joints, Kinect SDK bone list
name = kinectv2
joint_count = 25
center_joint = 1
joint_names = spine_base spine_mid neck head l_shoulder l_elbow l_wrist l_hand r_shoulder r_elbow r_wrist r_hand l_hip l_knee l_ankle l_foot r_hip r_knee r_ankle r_foot spine_shoulder l_handtip l_thumb r_handtip r_thumb
edges = 0-1 1-20 20-2 2-3 20-4 4-5 5-6 6-7 7-21 6-22 20-8 8-9 9-10 10-11 11-23 10-24 0-12 12-13 13-14 14-15 0-16 16-17 17-18 18-19
swap_map = 4-8 5-9 6-10 7-11 12-16 13-17 14-18 15-19 21-23 22-24
)";

}  // namespace

const std::vector<std::pair<std::string, std::string>>& builtin_topology_documents() {
    static const std::vector<std::pair<std::string, std::string>> docs = {
        {"smpl", kSmplTopology},
        {"smplx", kSmplxTopology},
        {"mhad", kMhadTopology},
        {"kinectv2", kKinectv2Topology},
    };
    return docs;
}

ConventionRegistry builtin_registry() {
    ConventionRegistry reg;
    for (const auto& [name, text] : builtin_topology_documents()) {
        auto conv = parse_convention(text);
        if (conv.name != name) throw topology_error("builtin topology name mismatch: " + name);
        reg.add(std::move(conv));
    }
    return reg;
}

int PoseSequence::valid_joints() const {
    int n = 0;
    for (auto m : valid_mask) n += m ? 1 : 0;
    return n;
}

PoseSequence pad_to_unified(const Tensor& raw, const std::string& convention,
                            const ConventionRegistry& registry) {
    const auto& conv = registry.get(convention);
    if (raw.ndim() != 4)
        throw shape_error("pad_to_unified expects a [C, V, T, P] array");
    const auto c = raw.dim(0), v = raw.dim(1), t = raw.dim(2), p = raw.dim(3);
    if (v != conv.joint_count)
        throw shape_error("joint dimension " + std::to_string(v) + " does not match " +
                          convention + " (" + std::to_string(conv.joint_count) + " joints)");
    if (!raw.all_finite()) throw shape_error("pad_to_unified: non-finite input entries");

    const int v_max = registry.v_max();
    PoseSequence seq;
    seq.convention = convention;
    seq.data = Tensor({c, v_max, t, p});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t vi = 0; vi < v; ++vi)
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    seq.data(ci, vi, ti, pi) = raw(ci, vi, ti, pi);
    seq.valid_mask.assign(static_cast<std::size_t>(v_max), 0);
    for (std::int64_t vi = 0; vi < v; ++vi) seq.valid_mask[static_cast<std::size_t>(vi)] = 1;
    return seq;
}

}  // namespace msclr
